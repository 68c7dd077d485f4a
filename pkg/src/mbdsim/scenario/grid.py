"""Synthetic Manhattan-grid traffic.

Vehicles drive right-hand lanes on a square grid, pick straight/left/right
at random at each intersection and leave when a move would take them off
the grid (unless the grid is closed).  Optionally some trips start and end
inside the grid, the way parked cars join and leave city traffic.  Each straight leg has its own
cruise speed, turns are circular arcs taken at a lateral-acceleration-limited
speed, and a car closing in on the one ahead in its lane slows down to keep a
standstill gap plus a time headway.  Vehicles are driven together step by
step so that followers see their leaders.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from mbdsim.sensing import VEHICLE_LENGTH
from mbdsim.scenario.model import (
    PSEUDONYM_PERIOD,
    STREAM_MOBILITY,
    STREAM_SPAWN,
    Scenario,
    Trajectory,
    random_phases,
)

_DIRS = ((1, 0), (0, 1), (-1, 0), (0, -1))  # E, N, W, S
_TURN_WEIGHTS = (0.5, 0.25, 0.25)  # straight, left, right
_TURN_CRAWL = 1.0  # m/s; a car inside an intersection never stops


@dataclass(frozen=True)
class GridParams:
    blocks: int = 5
    block_len: float = 200.0
    lanes: int = 1
    spawn_rate: float = 0.5  # vehicles per second, Poisson
    speed_min: float = 8.0
    speed_max: float = 14.0
    duration: float = 1000.0
    dt: float = 0.1
    initial_vehicles: int = 0
    closed: bool = False
    lane_width: float = 3.5
    accel_max: float = 2.0
    lat_accel: float = 2.0
    r_left: float = 12.0
    r_right: float = 8.0
    min_headway: float = 2.0
    follow_gap: float = 2.0  # standstill gap to the vehicle ahead, metres
    follow_time: float = 1.2  # time headway kept to the vehicle ahead, seconds
    decel_max: float = 4.0
    interior_share: float = 0.0  # fraction of spawns that start mid-edge inside the grid
    mean_trip: float = 0.0  # metres, exponential; 0 drives until the vehicle leaves the grid

    def __post_init__(self) -> None:
        if self.blocks < 1 or self.lanes < 1:
            raise ValueError("blocks and lanes must be at least 1")
        if self.spawn_rate < 0 or self.initial_vehicles < 0:
            raise ValueError("spawn_rate and initial_vehicles must be non-negative")
        if not 0 < self.speed_min <= self.speed_max:
            raise ValueError("need 0 < speed_min <= speed_max")
        if self.duration < 0 or self.dt <= 0:
            raise ValueError("need duration >= 0 and dt > 0")
        turn_zone = max(self.r_left, self.r_right) + self.lanes * self.lane_width
        if self.block_len < 2 * turn_zone + 10.0:
            raise ValueError(f"block_len must be at least {2 * turn_zone + 10.0:.1f} m for these turn radii")
        if self.accel_max <= 0 or self.lat_accel <= 0:
            raise ValueError("acceleration limits must be positive")
        if not 0.0 <= self.interior_share <= 1.0:
            raise ValueError("interior_share must be in [0, 1]")
        if self.mean_trip < 0:
            raise ValueError("mean_trip must be non-negative")

    @property
    def extent(self) -> float:
        return self.blocks * self.block_len


# Urban traffic with trips that start and end inside the grid.  "dense" keeps
# about 100 vehicles on the road, "sparse" about 30; "clean" is a closed
# grid where every vehicle drives from t = 0 to the end.
PRESETS = {
    "dense": GridParams(
        blocks=4,
        spawn_rate=1.1,
        initial_vehicles=100,
        speed_min=4.0,
        speed_max=9.0,
        interior_share=0.8,
        mean_trip=1000.0,
    ),
    "sparse": GridParams(
        blocks=4,
        spawn_rate=0.35,
        initial_vehicles=30,
        speed_min=4.0,
        speed_max=9.0,
        interior_share=0.8,
        mean_trip=1000.0,
    ),
    "clean": GridParams(
        blocks=4,
        spawn_rate=0.0,
        initial_vehicles=40,
        speed_min=4.0,
        speed_max=9.0,
        closed=True,
        duration=600.0,
    ),
}


def _left(d):
    return (-d[1], d[0])


def _right(d):
    return (d[1], -d[0])


class _Path:
    """Lines and arcs along arc length ``s``; lookups assume ``s`` never decreases."""

    def __init__(self) -> None:
        # line: (0, s0, length, speed, x0, y0, hx, hy)
        # arc:  (1, s0, length, speed, cx, cy, r, theta0, sign, heading0)
        self.prims: list[tuple] = []
        # lane-line key per primitive; vehicles sharing a key queue behind each other
        self.keys: list[tuple | None] = []
        self.length = 0.0
        self._i = 0

    def add_line(self, p0, p1, d, speed: float) -> None:
        length = math.hypot(p1[0] - p0[0], p1[1] - p0[1])
        if length <= 1e-9:
            return
        self.prims.append((0, self.length, length, speed, p0[0], p0[1], float(d[0]), float(d[1])))
        # lane line: direction plus the offset across it
        self.keys.append((d, round(d[0] * p0[1] - d[1] * p0[0], 6)))
        self.length += length

    def add_arc(self, t1, d_in, r: float, left: bool, speed: float) -> None:
        n = _left(d_in) if left else _right(d_in)
        cx, cy = t1[0] + r * n[0], t1[1] + r * n[1]
        theta0 = math.atan2(t1[1] - cy, t1[0] - cx)
        length = r * math.pi / 2.0
        heading0 = math.atan2(d_in[1], d_in[0])
        self.prims.append((1, self.length, length, speed, cx, cy, r, theta0, 1.0 if left else -1.0, heading0))
        self.keys.append(None)
        self.length += length

    def locate(self, s: float) -> int:
        i = self._i
        prims = self.prims
        while i + 1 < len(prims) and s >= prims[i + 1][1]:
            i += 1
        self._i = i
        return i

    def pose(self, s: float) -> tuple[float, float, float, float]:
        """``(x, y, heading, signed curvature)`` at arc length ``s``."""
        prim = self.prims[self.locate(s)]
        u = s - prim[1]
        if prim[0] == 0:
            _, _, _, _, x0, y0, hx, hy = prim
            return x0 + u * hx, y0 + u * hy, math.atan2(hy, hx), 0.0
        _, _, _, _, cx, cy, r, theta0, sign, heading0 = prim
        phi = sign * u / r
        theta = theta0 + phi
        return cx + r * math.cos(theta), cy + r * math.sin(theta), heading0 + phi, sign / r

    def target_speed(self, s: float, brake: float, lookahead: float) -> float:
        i = self.locate(s)
        prims = self.prims
        vt = prims[i][3]
        j = i + 1
        while j < len(prims) and prims[j][1] - s <= lookahead:
            v_next = prims[j][3]
            if v_next < vt:
                vt = min(vt, math.sqrt(v_next * v_next + 2.0 * brake * (prims[j][1] - s)))
            j += 1
        return vt


class _GridWalker:
    def __init__(self, p: GridParams, rng: np.random.Generator):
        self.p = p
        self.rng = rng

    def inside(self, node) -> bool:
        b = self.p.blocks
        return 0 <= node[0] <= b and 0 <= node[1] <= b

    def route(self, start_node, d, max_len: float) -> tuple[list, list, bool]:
        """Nodes visited and edge directions; third item says whether the walk left the grid."""
        L = self.p.block_len
        nodes = [start_node]
        dirs = [d]
        node = start_node
        travelled = 0.0
        while True:
            node = (node[0] + d[0], node[1] + d[1])
            nodes.append(node)
            travelled += L
            if travelled > max_len:
                return nodes, dirs, False
            options = []
            for w, nd in zip(_TURN_WEIGHTS, (d, _left(d), _right(d))):
                nxt = (node[0] + nd[0], node[1] + nd[1])
                if self.inside(nxt):
                    options.append((w, nd, False))
                elif not self.p.closed:
                    options.append((w, nd, True))
            weights = np.array([o[0] for o in options])
            pick = options[int(self.rng.choice(len(options), p=weights / weights.sum()))]
            if pick[2]:
                return nodes, dirs, True
            d = pick[1]
            dirs.append(d)

    def build_path(self, nodes, dirs, lane: int, start_frac: float) -> _Path:
        p = self.p
        L = p.block_len
        off = (lane + 0.5) * p.lane_width
        rng = self.rng
        path = _Path()

        def lane_point(node, d):
            r = _right(d)
            return (node[0] * L + off * r[0], node[1] * L + off * r[1])

        start = lane_point(nodes[0], dirs[0])
        start = (start[0] + start_frac * L * dirs[0][0], start[1] + start_frac * L * dirs[0][1])
        cursor = start
        leg_speed = rng.uniform(p.speed_min, p.speed_max)
        for i in range(1, len(dirs)):
            d_in, d_out = dirs[i - 1], dirs[i]
            if d_in == d_out:
                continue
            left = d_in[0] * d_out[1] - d_in[1] * d_out[0] > 0
            r = p.r_left if left else p.r_right
            ri, ro = _right(d_in), _right(d_out)
            node = nodes[i]
            corner = (node[0] * L + off * (ri[0] + ro[0]), node[1] * L + off * (ri[1] + ro[1]))
            t1 = (corner[0] - r * d_in[0], corner[1] - r * d_in[1])
            path.add_line(cursor, t1, d_in, leg_speed)
            path.add_arc(t1, d_in, r, left, math.sqrt(p.lat_accel * r))
            cursor = (corner[0] + r * d_out[0], corner[1] + r * d_out[1])
            leg_speed = rng.uniform(p.speed_min, p.speed_max)
        path.add_line(cursor, lane_point(nodes[-1], dirs[-1]), dirs[-1], leg_speed)
        return path


class _Car:
    """One vehicle being driven; rows are ``(t, x, y, heading, speed, ax, ay)``."""

    __slots__ = ("path", "s", "v", "a", "stop_at", "rows", "lanes", "on_arc", "x", "y", "h", "kappa")

    def __init__(self, path: _Path, stop_at: float):
        self.path = path
        self.s = 0.0
        self.v = path.prims[0][3]
        self.a = 0.0
        self.stop_at = stop_at
        self.rows: list[tuple] = []
        self.locate()

    def locate(self) -> None:
        """Update pose and lane memberships ``[(key, along-lane coordinate)]``.

        On a turn the car belongs to both the lane it leaves and the one it
        joins, so traffic in either lane keeps its distance.  The joined lane
        comes last.
        """
        path = self.path
        self.x, self.y, self.h, self.kappa = path.pose(self.s)
        i = path._i
        keys = path.keys
        self.on_arc = keys[i] is None
        if not self.on_arc:
            around = (keys[i],)
        else:
            around = tuple(keys[j] for j in (i - 1, i + 1) if 0 <= j < len(keys) and keys[j] is not None)
        self.lanes = [(k, self.x * k[0][0] + self.y * k[0][1]) for k in around]

    def trajectory(self) -> Trajectory:
        cols = np.array(self.rows, dtype=float).T
        heading = np.mod(cols[3], 2.0 * math.pi)
        return Trajectory(cols[0], cols[1], cols[2], heading, cols[4], cols[5], cols[6])

    def overlaps(self, other: _Car, clearance: float) -> bool:
        return any(k == ko and abs(u - uo) < clearance for k, u in self.lanes for ko, uo in other.lanes)


def _leader_gaps(cars: list[_Car]) -> dict[int, float]:
    """Bumper-to-bumper gap to the car ahead.

    Cars on a straight follow whatever is ahead in their lane; a turning car
    only looks at the lane it joins.  Turning cars therefore never wait on
    each other, which rules out gridlock cycles inside an intersection.
    """
    lanes: dict[tuple, list[tuple[float, int]]] = {}
    for i, car in enumerate(cars):
        for key, u in car.lanes:
            lanes.setdefault(key, []).append((u, i))
    gaps: dict[int, float] = {}
    for key, queue in lanes.items():
        if len(queue) < 2:
            continue
        queue.sort()
        for (u, i), (u_next, _) in zip(queue, queue[1:]):
            car = cars[i]
            if car.on_arc and key != car.lanes[-1][0]:
                continue
            gaps[i] = min(gaps.get(i, math.inf), u_next - u - VEHICLE_LENGTH)
    return gaps


def _simulate(cars_by_step: dict[int, list[tuple[int, _Car]]], p: GridParams) -> dict[int, Trajectory]:
    """Drive all cars together so that followers keep their distance.

    A car scheduled to appear where it would sit on top of another one waits
    until the spot is free; cars that cannot start before the end are dropped.
    """
    dt = p.dt
    last_step = int(math.floor(p.duration / dt + 1e-9))
    brake = 0.9 * p.accel_max
    lookahead = p.speed_max**2 / (2.0 * brake) + 1.0
    clearance = VEHICLE_LENGTH + p.follow_gap
    active: list[tuple[int, _Car]] = []
    waiting: list[tuple[int, _Car]] = []
    done: dict[int, Trajectory] = {}
    for step in range(last_step + 1):
        t = step * dt
        waiting.extend(cars_by_step.get(step, ()))
        still_waiting = []
        for idx, car in waiting:
            blocked = any(car.overlaps(other, clearance) for _, other in active)
            if blocked:
                still_waiting.append((idx, car))
            else:
                active.append((idx, car))
        waiting = still_waiting
        if not active:
            continue
        gaps = _leader_gaps([car for _, car in active])
        keep = []
        for i, (idx, car) in enumerate(active):
            c, sn = math.cos(car.h), math.sin(car.h)
            lat = car.kappa * car.v * car.v
            car.rows.append((t, car.x, car.y, car.h, car.v, car.a * c - lat * sn, car.a * sn + lat * c))
            if step >= last_step:
                done[idx] = car.trajectory()
                continue
            vt = car.path.target_speed(car.s, brake, lookahead)
            gap = gaps.get(i)
            if gap is not None:
                floor = _TURN_CRAWL if car.on_arc else 0.0
                vt = min(vt, max(floor, (gap - p.follow_gap) / p.follow_time))
            a = min(max((vt - car.v) / dt, -p.decel_max), p.accel_max)
            if car.v + a * dt < 0.0:
                a = -car.v / dt
            s_next = car.s + car.v * dt + 0.5 * a * dt * dt
            if s_next >= car.path.length or s_next >= car.stop_at:
                done[idx] = car.trajectory()
                continue
            car.s = s_next
            car.v = max(0.0, car.v + a * dt)
            car.a = a
            car.locate()
            keep.append((idx, car))
        active = keep
    return done


def _initial_lane_key(p: GridParams, node, d, frac: float) -> tuple[tuple, float]:
    """Lane key and along-lane coordinate of a mid-edge start on lane 0 (see ``build_path``)."""
    off = 0.5 * p.lane_width
    r = _right(d)
    x = node[0] * p.block_len + off * r[0] + frac * p.block_len * d[0]
    y = node[1] * p.block_len + off * r[1] + frac * p.block_len * d[1]
    return (d, round(d[0] * y - d[1] * x, 6)), x * d[0] + y * d[1]


def _random_edge(rng: np.random.Generator, b: int):
    """Uniform directed edge of the grid as ``(start node, direction)``."""
    while True:
        node = (int(rng.integers(0, b + 1)), int(rng.integers(0, b + 1)))
        d = _DIRS[int(rng.integers(0, 4))]
        if 0 <= node[0] + d[0] <= b and 0 <= node[1] + d[1] <= b:
            return node, d


def synth_grid(params: GridParams, seed: int, pseudonym_period: float = PSEUDONYM_PERIOD) -> Scenario:
    """Generate a grid scenario; the same ``(params, seed)`` gives an identical result."""
    p = params
    b = p.blocks
    spawn_rng = np.random.default_rng([seed, STREAM_SPAWN])
    max_len = p.speed_max * p.duration + 2 * p.block_len

    # (start node, direction, start fraction along the first edge, first step)
    starts: list[tuple] = []
    placed: list[tuple] = []
    spacing = VEHICLE_LENGTH + p.follow_gap + 1.0
    for _ in range(p.initial_vehicles):
        # redraw until the car does not overlap one already placed in its lane
        for _ in range(100):
            node, d = _random_edge(spawn_rng, b)
            frac = float(spawn_rng.uniform(0.15, 0.6))
            lane = _initial_lane_key(p, node, d, frac)
            if all(k != lane[0] or abs(u - lane[1]) >= spacing for k, u in placed):
                break
        placed.append(lane)
        starts.append((node, d, frac, 0))

    entries = (
        [((i, 0), (0, 1)) for i in range(b + 1)]
        + [((i, b), (0, -1)) for i in range(b + 1)]
        + [((0, j), (1, 0)) for j in range(b + 1)]
        + [((b, j), (-1, 0)) for j in range(b + 1)]
    )
    last_used = [-math.inf] * len(entries)
    if p.spawn_rate > 0:
        t = 0.0
        while True:
            t += spawn_rng.exponential(1.0 / p.spawn_rate)
            if t > p.duration:
                break
            step = int(math.ceil(t / p.dt - 1e-9))
            if p.interior_share > 0 and spawn_rng.random() < p.interior_share:
                node, d = _random_edge(spawn_rng, b)
                frac = float(spawn_rng.uniform(0.15, 0.6))
                if step * p.dt <= p.duration:
                    starts.append((node, d, frac, step))
                continue
            for _ in range(10):
                e = int(spawn_rng.integers(0, len(entries)))
                if t - last_used[e] >= p.min_headway:
                    break
            else:
                continue
            last_used[e] = t
            if step * p.dt > p.duration:
                continue
            starts.append((entries[e][0], entries[e][1], 0.0, step))

    cars_by_step: dict[int, list[tuple[int, _Car]]] = {}
    for idx, (node, d, frac, step) in enumerate(starts):
        rng = np.random.default_rng([seed, STREAM_MOBILITY, idx])
        walker = _GridWalker(p, rng)
        lane = int(rng.integers(0, p.lanes))
        nodes, dirs, _ = walker.route(node, d, max_len)
        path = walker.build_path(nodes, dirs, lane, frac)
        stop_at = float(rng.exponential(p.mean_trip)) if p.mean_trip > 0 else math.inf
        cars_by_step.setdefault(step, []).append((idx, _Car(path, stop_at)))
    driven = _simulate(cars_by_step, p)
    vehicles = [driven[idx] for idx in sorted(driven)]

    n = len(vehicles)
    meta = {"generator": "grid", "params": asdict(p)}
    return Scenario(
        duration=p.duration,
        dt=p.dt,
        vehicles=tuple(vehicles),
        attacker_flags=(False,) * n,
        pseudonym_phase=random_phases(n, pseudonym_period, seed),
        seed=seed,
        pseudonym_period=pseudonym_period,
        meta=meta,
    )
