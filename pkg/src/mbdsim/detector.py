"""CAM and CPM verification against a receiver's track registry.

Branch order for any direct report (a CAM body or a CPM sender block):

1. known station id with a fresh filter: gate the residual, update on pass;
2. otherwise the closest fresh filter of any id: gate, rebind on pass;
3. otherwise a new vehicle, admitted only from the margin annulus at the
   edge of radio range or when the receiver's own sensor sees it;
4. otherwise reject.

Only accepted messages touch the registry.  A CAM that fails the gate of its
own known track is rejected outright and never falls through to branch 2.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

from mbdsim import kalman
from mbdsim.geo import LocalPoint, Pose, distance, in_sector
from mbdsim.messages import (
    CamMessage,
    CpmMessage,
    KinematicReport,
    PerceivedObject,
    kinematics_ok,
    object_to_global,
)
from mbdsim.radio import RadioConfig
from mbdsim.registry import Track, TrackOrigin, TrackRegistry
from mbdsim.sensing import SensorConfig


class Decision(enum.Enum):
    ACCEPT_KNOWN = "AcceptKnown"
    ACCEPT_PSEUDONYM_CHANGE = "AcceptPseudonymChange"
    ACCEPT_NEW_MARGIN = "AcceptNewMargin"
    ACCEPT_NEW_SENSED = "AcceptNewSensed"
    REJECT = "Reject"

    @property
    def accepted(self) -> bool:
        return self is not Decision.REJECT


class ObjectAction(enum.Enum):
    MATCHED_NO_UPDATE = "MatchedNoUpdate"
    CREATED_TRACK = "CreatedTrack"
    DISCARDED_RANGE_BOUND = "DiscardedRangeBound"
    DISCARDED_OUT_OF_SECTOR = "DiscardedOutOfSector"


@dataclass(frozen=True)
class Verdict:
    decision: Decision
    matched_track: Track | None = None
    d_pos: float | None = None
    d_vel: float | None = None
    reason: str | None = None

    def __post_init__(self) -> None:
        if self.decision is Decision.REJECT and self.matched_track is not None:
            raise ValueError("a rejection cannot carry a matched track")


def _nothing_sensed() -> Sequence[LocalPoint]:
    return ()


@dataclass
class DetectorContext:
    """Everything one receiver knows when it verifies a message.

    ``sense`` returns the positions the receiver's own sensor currently
    perceives; it is only called when the sensed-admission branch needs it.
    """

    registry: TrackRegistry
    self_state: KinematicReport
    self_heading: float = 0.0
    sensor: SensorConfig = field(default_factory=SensorConfig.front)
    radio: RadioConfig = field(default_factory=RadioConfig)
    s_max: float = 100.0
    association_radius: float = 3.0
    now: float = 0.0
    sense: Callable[[], Sequence[LocalPoint]] = _nothing_sensed

    def __post_init__(self) -> None:
        if self.s_max < self.sensor.range:
            raise ValueError(f"s_max ({self.s_max}) must not be below the sensor range ({self.sensor.range})")
        if self.association_radius <= 0:
            raise ValueError("association_radius must be positive")

    @property
    def pose(self) -> Pose:
        return Pose(self.self_state.position, self.self_heading)


_MALFORMED = Verdict(Decision.REJECT, reason="malformed")


def _verify_report(station_id: int, report: KinematicReport, ctx: DetectorContext) -> Verdict:
    if not kinematics_ok(report):
        return _MALFORMED
    reg = ctx.registry
    params = reg.params
    now = ctx.now
    accel = report.acceleration

    track = reg.lookup(station_id, now)
    if track is not None:
        d_pos, d_vel = kalman.residual(track.filter, report, accel, now - track.filter.last_update)
        if kalman.plausible(d_pos, d_vel, params):
            reg.update_track(track, report, now)
            return Verdict(Decision.ACCEPT_KNOWN, track, d_pos, d_vel)
        return Verdict(Decision.REJECT, None, d_pos, d_vel, reason="known-deviation")

    match = reg.best_match(report, accel, now)
    d_pos = d_vel = None
    if match is not None:
        d_pos, d_vel = match.d_pos, match.d_vel
        if kalman.plausible(d_pos, d_vel, params):
            reg.rebind(match.track, station_id, report, now)
            return Verdict(Decision.ACCEPT_PSEUDONYM_CHANGE, match.track, d_pos, d_vel)

    d_self = distance(report.position, ctx.self_state.position)
    if ctx.radio.margin_inner <= d_self <= ctx.radio.r_max:
        new = reg.insert_new(report, station_id, TrackOrigin.CAM_DIRECT, now)
        return Verdict(Decision.ACCEPT_NEW_MARGIN, new, d_pos, d_vel)

    sensor_pose = ctx.sensor.origin(ctx.pose)
    if in_sector(report.position, sensor_pose, ctx.sensor.fov, ctx.sensor.range):
        radius = ctx.association_radius
        claimed = report.position
        if any(distance(claimed, p) <= radius for p in ctx.sense()):
            new = reg.insert_new(report, station_id, TrackOrigin.CAM_DIRECT, now)
            return Verdict(Decision.ACCEPT_NEW_SENSED, new, d_pos, d_vel)

    return Verdict(Decision.REJECT, None, d_pos, d_vel, reason="unverifiable")


def _check_time(gen_time: float, ctx: DetectorContext) -> None:
    if gen_time > ctx.now:
        raise ValueError(f"message generated at {gen_time} is from the future (now={ctx.now})")


def verify_cam(cam: CamMessage, ctx: DetectorContext) -> Verdict:
    """Accept or reject one CAM, updating the registry on acceptance."""
    _check_time(cam.gen_time, ctx)
    return _verify_report(cam.station_id, cam.body, ctx)


def verify_cpm(cpm: CpmMessage, ctx: DetectorContext) -> tuple[Verdict, list[ObjectAction]]:
    """Verify the CPM sender like a CAM; only then look at its perceived objects."""
    _check_time(cpm.gen_time, ctx)
    verdict = _verify_report(cpm.station_id, cpm.sender, ctx)
    if not verdict.decision.accepted:
        return verdict, []
    actions = [process_perceived_object(obj, cpm.sender, cpm.sender_heading, ctx) for obj in cpm.objects]
    return verdict, actions


def process_perceived_object(
    obj: PerceivedObject, sender: KinematicReport, sender_heading: float, ctx: DetectorContext
) -> ObjectAction:
    """Use one perceived object from an accepted CPM.

    Indirect evidence never updates an existing filter; it can only seed an
    unbound one.  An object that coincides with the receiver itself counts
    as matched.
    """
    g = object_to_global(obj, sender, sender_heading)
    d_sender = distance(g.position, sender.position)
    # NaN fails every comparison, so test for the good case
    if not (d_sender <= ctx.s_max) or not kinematics_ok(g):
        return ObjectAction.DISCARDED_RANGE_BOUND

    params = ctx.registry.params
    d_pos, d_vel = kalman.residual_between(g, ctx.self_state)
    if kalman.plausible(d_pos, d_vel, params):
        return ObjectAction.MATCHED_NO_UPDATE

    match = ctx.registry.best_match(g, g.acceleration, ctx.now)
    if match is not None and kalman.plausible(match.d_pos, match.d_vel, params):
        return ObjectAction.MATCHED_NO_UPDATE

    sender_pose = Pose(sender.position, sender_heading)
    if in_sector(g.position, sender_pose, ctx.sensor.fov, ctx.s_max):
        ctx.registry.insert_new(g, None, TrackOrigin.CPM_PERCEIVED, ctx.now)
        return ObjectAction.CREATED_TRACK
    return ObjectAction.DISCARDED_OUT_OF_SECTOR


def _num(v: float | None) -> str:
    if v is None or not math.isfinite(v):
        return "null"
    return repr(float(v))


def audit_record(
    rx_time: float,
    receiver: int,
    station_id: int,
    msg_type: str,
    verdict: Verdict,
    true_sender: int | None = None,
    falsified: bool | None = None,
    actions: Sequence[ObjectAction] = (),
) -> str:
    """One JSON audit line for a verdict.

    Ground-truth columns are filled in by the simulation, never by the
    detector itself.
    """
    parts = [
        f'"rx_time":{_num(rx_time)}',
        f'"receiver":{int(receiver)}',
        f'"station_id":{int(station_id)}',
        f'"msg_type":"{msg_type}"',
        f'"decision":"{verdict.decision.value}"',
        f'"d_pos":{_num(verdict.d_pos)}',
        f'"d_vel":{_num(verdict.d_vel)}',
    ]
    if true_sender is not None:
        parts.append(f'"true_sender":{int(true_sender)}')
    if falsified is not None:
        parts.append(f'"falsified":{"true" if falsified else "false"}')
    if actions:
        parts.append('"actions":[' + ",".join(f'"{a.value}"' for a in actions) + "]")
    return "{" + ",".join(parts) + "}"
