import math

import pytest

from conftest import report
from mbdsim.detector import (
    Decision,
    DetectorContext,
    ObjectAction,
    Verdict,
    audit_record,
    process_perceived_object,
    verify_cam,
    verify_cpm,
)
from mbdsim.geo import LocalPoint
from mbdsim.messages import CamMessage, CpmMessage, PerceivedObject, global_to_object
from mbdsim.radio import RadioConfig
from mbdsim.registry import TrackOrigin, TrackRegistry
from mbdsim.sensing import SensorConfig


def ctx(reg=None, now=0.0, sensor=None, sensed=(), **kw):
    return DetectorContext(
        registry=reg if reg is not None else TrackRegistry(),
        self_state=report(0, 0, 10, 0),
        sensor=sensor or SensorConfig.front(),
        radio=RadioConfig(r_max=400, d_margin=50, p_loss=0.0),
        now=now,
        sense=lambda: [LocalPoint(*p) for p in sensed],
        **kw,
    )


def cam(sid, t, x, y=0.0, vx=10.0, vy=0.0):
    return CamMessage(sid, t, report(x, y, vx, vy))


def _known(reg, sid=5, x=200.0):
    reg.insert_new(report(x, 0, 10, 0), sid, TrackOrigin.CAM_DIRECT, 0.0)


def test_known_on_trajectory():
    reg = TrackRegistry()
    _known(reg)
    v = verify_cam(cam(5, 0.1, 201.0), ctx(reg, 0.1))
    assert v.decision is Decision.ACCEPT_KNOWN
    assert v.d_pos < 0.1
    assert reg.lookup(5, 0.1).filter.last_update == 0.1


def test_known_with_large_offset_rejected_without_update():
    reg = TrackRegistry()
    _known(reg)
    before = reg.snapshot()
    v = verify_cam(cam(5, 0.1, 201.0 + 40.0), ctx(reg, 0.1))
    assert v.decision is Decision.REJECT
    assert v.d_pos == pytest.approx(40.0)
    assert v.reason == "known-deviation"
    assert reg.snapshot() == before


def test_known_reject_does_not_fall_through_to_rebind():
    # a second track sits exactly where the falsified claim points
    reg = TrackRegistry()
    _known(reg, sid=5, x=200.0)
    _known(reg, sid=6, x=240.0)
    v = verify_cam(cam(5, 0.1, 241.0), ctx(reg, 0.1))
    assert v.decision is Decision.REJECT
    assert reg.lookup(6, 0.1).bound_id == 6


def test_pseudonym_change():
    reg = TrackRegistry()
    _known(reg)
    v = verify_cam(cam(77, 0.1, 201.0), ctx(reg, 0.1))
    assert v.decision is Decision.ACCEPT_PSEUDONYM_CHANGE
    assert reg.lookup(5, 0.1) is None
    assert reg.lookup(77, 0.1) is v.matched_track


def test_new_in_margin():
    v = verify_cam(cam(9, 0.0, 400 - 50 + 1.0), ctx())
    assert v.decision is Decision.ACCEPT_NEW_MARGIN


@pytest.mark.parametrize("x,expected", [(350.0, Decision.ACCEPT_NEW_MARGIN), (400.0, Decision.ACCEPT_NEW_MARGIN), (349.99, Decision.REJECT)])
def test_margin_edges(x, expected):
    assert verify_cam(cam(9, 0.0, x), ctx()).decision is expected


def test_new_sensed_by_omni():
    v = verify_cam(cam(9, 0.0, -50.0), ctx(sensor=SensorConfig.omni(), sensed=[(-49.0, 0.5)]))
    assert v.decision is Decision.ACCEPT_NEW_SENSED


def test_front_sensor_cannot_vouch_for_rear():
    v = verify_cam(cam(9, 0.0, -50.0), ctx(sensed=[(-50.0, 0.0)]))
    assert v.decision is Decision.REJECT


def test_claim_without_real_vehicle_rejected():
    v = verify_cam(cam(9, 0.0, 50.0), ctx(sensed=[(50.0, 3.5)]))
    assert v.decision is Decision.REJECT
    assert v.reason == "unverifiable"


def test_unknown_not_sensed_rejected():
    reg = TrackRegistry()
    v = verify_cam(cam(9, 0.0, 100.0), ctx(reg))
    assert v.decision is Decision.REJECT
    assert len(reg) == 0


def test_malformed_rejected():
    v = verify_cam(cam(9, 0.0, math.nan), ctx())
    assert (v.decision, v.reason) == (Decision.REJECT, "malformed")
    v = verify_cam(cam(9, 0.0, 360.0, vx=90.0), ctx())
    assert v.reason == "malformed"


def test_future_message_is_a_bug():
    with pytest.raises(ValueError):
        verify_cam(cam(9, 1.0, 360.0), ctx(now=0.5))


def test_reject_cannot_hold_track():
    reg = TrackRegistry()
    t = reg.insert_new(report(), 1, TrackOrigin.CAM_DIRECT, 0.0)
    with pytest.raises(ValueError):
        Verdict(Decision.REJECT, t)


def _cpm(sid, t, sender, objects=(), heading=0.0):
    return CpmMessage(sid, t, sender, heading, tuple(objects))


def test_cpm_from_unverifiable_sender():
    reg = TrackRegistry()
    obj = PerceivedObject((40.0, 0.0), (0.0, 0.0), (0.0, 0.0))
    v, actions = verify_cpm(_cpm(9, 0.0, report(100, 0, 10, 0), [obj]), ctx(reg))
    assert v.decision is Decision.REJECT
    assert actions == []
    assert len(reg) == 0


def test_cpm_known_sender_no_objects():
    reg = TrackRegistry()
    _known(reg)
    v, actions = verify_cpm(_cpm(5, 0.1, report(201, 0, 10, 0)), ctx(reg, 0.1))
    assert v.decision is Decision.ACCEPT_KNOWN
    assert actions == []


def test_cpm_known_sender_new_object():
    reg = TrackRegistry()
    _known(reg)
    obj = PerceivedObject((40.0, 0.0), (0.0, 0.0), (0.0, 0.0))
    v, actions = verify_cpm(_cpm(5, 0.1, report(201, 0, 10, 0), [obj]), ctx(reg, 0.1))
    assert (v.decision, actions) == (Decision.ACCEPT_KNOWN, [ObjectAction.CREATED_TRACK])
    created = [t for t in reg if t.origin is TrackOrigin.CPM_PERCEIVED]
    assert len(created) == 1
    assert created[0].bound_id is None
    assert created[0].filter.mean[:2] == (241.0, 0.0)
    # the next CAM from that vehicle binds the CPM-born track
    v2 = verify_cam(cam(33, 0.2, 242.0), ctx(reg, 0.2))
    assert v2.decision is Decision.ACCEPT_PSEUDONYM_CHANGE
    assert v2.matched_track is created[0]


def test_object_beyond_reach_discarded():
    reg = TrackRegistry()
    obj = PerceivedObject((150.0, 0.0), (0.0, 0.0), (0.0, 0.0))
    assert process_perceived_object(obj, report(200, 0), 0.0, ctx(reg)) is ObjectAction.DISCARDED_RANGE_BOUND
    assert len(reg) == 0


def test_object_on_existing_track_leaves_it_untouched():
    reg = TrackRegistry()
    _known(reg, sid=8, x=100.0)
    before = reg.snapshot()
    sender = report(60, 0, 10, 0)
    obj = global_to_object(report(101, 0, 10, 0), sender, 0.0)
    assert process_perceived_object(obj, sender, 0.0, ctx(reg, 0.1)) is ObjectAction.MATCHED_NO_UPDATE
    assert reg.snapshot() == before


def test_object_that_is_the_receiver():
    reg = TrackRegistry()
    sender = report(40, 0, 10, 0)
    obj = global_to_object(report(0, 0, 10, 0), sender, math.pi)
    assert process_perceived_object(obj, sender, math.pi, ctx(reg)) is ObjectAction.MATCHED_NO_UPDATE
    assert len(reg) == 0


def test_object_ahead_creates_track():
    obj = PerceivedObject((40.0, 0.0), (0.0, 0.0), (0.0, 0.0))
    assert process_perceived_object(obj, report(200, 0), 0.0, ctx()) is ObjectAction.CREATED_TRACK


def test_object_outside_sender_sector():
    obj = PerceivedObject((-40.0, 0.0), (0.0, 0.0), (0.0, 0.0))
    assert process_perceived_object(obj, report(200, 0), 0.0, ctx()) is ObjectAction.DISCARDED_OUT_OF_SECTOR


def test_reach_below_sensor_range_rejected():
    with pytest.raises(ValueError):
        ctx(s_max=50.0)


def test_audit_line_is_json():
    import json

    v = verify_cam(cam(9, 0.0, 100.0), ctx())
    rec = json.loads(audit_record(1.5, 3, 9, "cam", v, true_sender=4, falsified=False))
    assert rec == {
        "rx_time": 1.5,
        "receiver": 3,
        "station_id": 9,
        "msg_type": "cam",
        "decision": "Reject",
        "d_pos": None,
        "d_vel": None,
        "true_sender": 4,
        "falsified": False,
    }
