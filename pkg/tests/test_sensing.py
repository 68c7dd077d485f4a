import math
import random

import numpy as np
import pytest
from shapely import affinity
from shapely.geometry import LineString, box

from conftest import report
from mbdsim.geo import LocalPoint, in_sector, make_pose
from mbdsim.messages import object_to_global
from mbdsim.radio import RadioConfig, deliver
from mbdsim.sensing import (
    SensorConfig,
    VehicleFootprint,
    build_cpm_objects,
    perceive,
    segment_hits_rectangle,
)


def fp(x, y, h=0.0):
    return VehicleFootprint(LocalPoint(x, y), h)


def _polygon(f):
    r = box(-f.length / 2, -f.width / 2, f.length / 2, f.width / 2)
    r = affinity.rotate(r, f.heading, origin=(0, 0), use_radians=True)
    return affinity.translate(r, f.center[0], f.center[1])


def _oracle(pose, others, cfg):
    seen = set()
    for i, target in enumerate(others):
        if not in_sector(target.center, pose, cfg.fov, cfg.range):
            continue
        ray = LineString([pose.position, target.center])
        if not any(j != i and ray.intersects(_polygon(o)) for j, o in enumerate(others)):
            seen.add(i)
    return seen


def test_single_target_ahead():
    assert perceive(make_pose(0, 0, 0), [fp(50, 0)], SensorConfig.front()) == [0]


def test_collinear_blocker_hides_target():
    assert perceive(make_pose(0, 0, 0), [fp(50, 0), fp(25, 0)], SensorConfig.front()) == [1]


@pytest.mark.parametrize("seed", range(60))
def test_occlusion_matches_polygon_oracle(seed):
    rng = random.Random(seed)
    others = [fp(rng.uniform(-60, 60), rng.uniform(-60, 60), rng.uniform(0, 2 * math.pi)) for _ in range(8)]
    pose = make_pose(0, 0, rng.uniform(0, 2 * math.pi))
    for cfg in (SensorConfig.front(), SensorConfig.omni()):
        assert set(perceive(pose, others, cfg)) == _oracle(pose, others, cfg)


def test_segment_rectangle_edges():
    r = fp(0, 0)
    assert segment_hits_rectangle(LocalPoint(-5, 0.9), LocalPoint(5, 0.9), r)
    assert not segment_hits_rectangle(LocalPoint(-5, 0.91), LocalPoint(5, 0.91), r)
    assert not segment_hits_rectangle(LocalPoint(-10, 0), LocalPoint(-2.26, 0), r)
    assert segment_hits_rectangle(LocalPoint(0, 0), LocalPoint(0, 0), r)


def test_perceived_nearest_first():
    others = [fp(60, 10), fp(20, -5), fp(40, 3)]
    assert perceive(make_pose(0, 0, 0), others, SensorConfig.front()) == [1, 2, 0]


def test_omni_sees_a_superset():
    rng = random.Random(3)
    for _ in range(50):
        others = [fp(rng.uniform(-80, 80), rng.uniform(-80, 80), rng.uniform(0, 6.3)) for _ in range(10)]
        pose = make_pose(0, 0, rng.uniform(0, 6.3))
        assert set(perceive(pose, others, SensorConfig.front())) <= set(perceive(pose, others, SensorConfig.omni()))


def test_sensor_config_validation():
    with pytest.raises(ValueError):
        SensorConfig.front(range_m=0)
    assert SensorConfig.of_kind("omni").fov == pytest.approx(2 * math.pi)


def test_cpm_objects_round_trip():
    me = report(10, 20, 5, 1)
    truth = {3: report(40, 25, 8, 0), 4: report(15, 60, 0, 9), 5: report(-10, 20, -3, 1)}
    objs = build_cpm_objects(me, 0.7, [3, 4, 5], truth)
    assert len(objs) == 3
    back = sorted(object_to_global(o, me, 0.7) for o in objs)
    for g, t in zip(back, sorted(truth.values())):
        assert g.position == pytest.approx(t.position, abs=1e-9)
        assert g.velocity == pytest.approx(t.velocity, abs=1e-9)


def test_cpm_objects_capped_to_nearest():
    me = report()
    truth = [report(d, 0) for d in (70, 10, 50, 30, 20, 60, 40)]
    objs = build_cpm_objects(me, 0.0, list(range(7)), truth)
    assert [o.rel_position[0] for o in objs] == [10, 20, 30, 40, 50]
    assert build_cpm_objects(me, 0.0, [], truth) == []


def test_full_delivery_without_loss():
    pos = np.array([[0, 0], [100, 0], [0, 399], [401, 0]], dtype=float)
    present = np.ones(4, dtype=bool)
    assert deliver(0, pos, present, RadioConfig(p_loss=0.0), np.random.default_rng(0)) == [1, 2]


def test_range_boundary_inclusive():
    pos = np.array([[0, 0], [400, 0]], dtype=float)
    assert deliver(0, pos, np.ones(2, bool), RadioConfig(p_loss=0.0), np.random.default_rng(0)) == [1]


def test_absent_vehicles_never_receive():
    pos = np.zeros((3, 2))
    present = np.array([True, False, True])
    assert deliver(0, pos, present, RadioConfig(p_loss=0.0), np.random.default_rng(0)) == [2]


def test_heavy_loss_rate_within_three_sigma():
    eps = 0.02
    radio = RadioConfig(p_loss=1 - eps)
    rng = np.random.default_rng(11)
    pos = np.array([[0, 0], [10, 0]], dtype=float)
    n = 10_000
    got = sum(len(deliver(0, pos, np.ones(2, bool), radio, rng)) for _ in range(n))
    sigma = math.sqrt(n * eps * (1 - eps))
    assert abs(got - n * eps) <= 3 * sigma


@pytest.mark.parametrize("kw", [dict(p_loss=1.0), dict(p_loss=-0.1), dict(d_margin=0), dict(d_margin=400)])
def test_radio_validation(kw):
    with pytest.raises(ValueError):
        RadioConfig(**kw)
