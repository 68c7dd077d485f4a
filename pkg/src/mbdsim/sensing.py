"""On-board sensors with vehicle-body occlusion.

Visibility is decided on the target's centre point: a vehicle is seen when
its centre is inside the sensor sector and the sight line to it crosses no
other vehicle's rectangle.  Perception is noise-free.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence

from mbdsim.geo import TWO_PI, LocalPoint, Pose, distance, in_sector
from mbdsim.messages import MAX_OBJECTS, KinematicReport, PerceivedObject, global_to_object

VEHICLE_LENGTH = 4.5
VEHICLE_WIDTH = 1.8
_HALF_DIAG = math.hypot(VEHICLE_LENGTH, VEHICLE_WIDTH) / 2.0


class SensorKind(enum.Enum):
    FRONT = "front"
    OMNI = "omni"


@dataclass(frozen=True)
class SensorConfig:
    kind: SensorKind
    fov: float
    range: float
    mount: tuple[float, float] = (0.0, 0.0)  # forward/left offset from the vehicle centre

    def __post_init__(self) -> None:
        if not 0.0 < self.fov <= TWO_PI:
            raise ValueError(f"fov must lie in (0, 2pi], got {self.fov}")
        if not self.range > 0.0:
            raise ValueError(f"range must be positive, got {self.range}")

    @classmethod
    def front(cls, range_m: float = 80.0) -> SensorConfig:
        return cls(SensorKind.FRONT, math.pi / 3.0, range_m)

    @classmethod
    def omni(cls, range_m: float = 80.0) -> SensorConfig:
        return cls(SensorKind.OMNI, TWO_PI, range_m)

    @classmethod
    def of_kind(cls, kind: SensorKind | str, range_m: float = 80.0) -> SensorConfig:
        kind = SensorKind(kind)
        return cls.front(range_m) if kind is SensorKind.FRONT else cls.omni(range_m)

    def origin(self, pose: Pose) -> Pose:
        fx, fy = self.mount
        if fx == 0.0 and fy == 0.0:
            return pose
        c, s = math.cos(pose.heading), math.sin(pose.heading)
        x, y = pose.position
        return Pose(LocalPoint(x + c * fx - s * fy, y + s * fx + c * fy), pose.heading)


class VehicleFootprint(NamedTuple):
    center: LocalPoint
    heading: float
    length: float = VEHICLE_LENGTH
    width: float = VEHICLE_WIDTH


def segment_hits_rectangle(a: LocalPoint, b: LocalPoint, rect: VehicleFootprint) -> bool:
    """Whether segment ``a``-``b`` touches the closed oriented rectangle.

    Liang-Barsky clipping in the rectangle's own frame.
    """
    cx, cy = rect.center
    c, s = math.cos(rect.heading), math.sin(rect.heading)
    ax, ay = a[0] - cx, a[1] - cy
    bx, by = b[0] - cx, b[1] - cy
    # rotate into the rectangle frame (x along its heading)
    x0, y0 = c * ax + s * ay, -s * ax + c * ay
    x1, y1 = c * bx + s * by, -s * bx + c * by
    hx, hy = rect.length / 2.0, rect.width / 2.0
    t0, t1 = 0.0, 1.0
    dx, dy = x1 - x0, y1 - y0
    for p, q in ((-dx, x0 + hx), (dx, hx - x0), (-dy, y0 + hy), (dy, hy - y0)):
        if p == 0.0:
            if q < 0.0:
                return False
            continue
        r = q / p
        if p < 0.0:
            if r > t1:
                return False
            if r > t0:
                t0 = r
        else:
            if r < t0:
                return False
            if r < t1:
                t1 = r
    return t0 <= t1


def perceive(self_pose: Pose, others: Sequence[VehicleFootprint], cfg: SensorConfig) -> list[int]:
    """Indices of ``others`` visible to the sensor, nearest first.

    Ties in distance are broken by index.
    """
    origin = cfg.origin(self_pose)
    o = origin.position
    reach = cfg.range + max(VEHICLE_LENGTH, VEHICLE_WIDTH)
    nearby = []
    candidates = []
    for i, fp in enumerate(others):
        d = distance(o, fp.center)
        if d > reach:
            continue
        nearby.append((i, d, fp))
        if in_sector(fp.center, origin, cfg.fov, cfg.range):
            candidates.append((d, i, fp))
    candidates.sort()
    seen = []
    for d, i, fp in candidates:
        blocked = False
        for j, dj, other in nearby:
            # a blocker's centre cannot be further out than the target plus half a body
            if j == i or dj > d + _HALF_DIAG:
                continue
            if segment_hits_rectangle(o, fp.center, other):
                blocked = True
                break
        if not blocked:
            seen.append(i)
    return seen


def build_cpm_objects(
    self_state: KinematicReport,
    self_heading: float,
    perceived: Sequence[int],
    ground_truth: Mapping[int, KinematicReport] | Sequence[KinematicReport],
    cap: int = MAX_OBJECTS,
) -> list[PerceivedObject]:
    """Sender-relative objects for the ``cap`` nearest perceived vehicles."""
    if cap < 0:
        raise ValueError("cap must be non-negative")
    here = self_state.position
    ranked = sorted(perceived, key=lambda i: (distance(here, ground_truth[i].position), i))
    return [global_to_object(ground_truth[i], self_state, self_heading) for i in ranked[:cap]]
