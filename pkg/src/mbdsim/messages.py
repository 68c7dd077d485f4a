"""CAM/CPM payloads, the perceived-object frame transform, and the message log.

The detector only ever sees ``CamMessage``/``CpmMessage``.  Ground truth
(who really sent it, whether it was falsified) rides on ``SimEnvelope`` and
is used for scoring only.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import NamedTuple, Union

from mbdsim.geo import LocalPoint, rotate

MAX_OBJECTS = 5
MAX_SPEED = 70.0  # m/s
MAX_ACCEL = 12.0  # m/s^2
_MAX_STATION_ID = 2**32 - 1

Vec2 = tuple[float, float]


class TraceParseError(ValueError):
    """Malformed message-log line.  ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f"line {line}"
            if column is not None:
                where += f", column {column}"
            where += ": "
        super().__init__(where + message)


def check_station_id(value: int) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValueError(f"station id must be an int, got {value!r}")
    if not 0 < value <= _MAX_STATION_ID:
        raise ValueError(f"station id {value} outside 1..2^32-1")
    return value


class KinematicReport(NamedTuple):
    position: LocalPoint
    velocity: Vec2
    acceleration: Vec2


def kinematics_ok(report: KinematicReport) -> bool:
    """Finite values within the physical envelope (speed and acceleration caps)."""
    px, py = report.position
    # NaN fails every comparison, so the caps also reject non-finite vectors
    return (
        math.isfinite(px)
        and math.isfinite(py)
        and math.hypot(*report.velocity) <= MAX_SPEED
        and math.hypot(*report.acceleration) <= MAX_ACCEL
    )


class PerceivedObject(NamedTuple):
    rel_position: Vec2  # x along sender heading, y to its left
    rel_velocity: Vec2
    rel_acceleration: Vec2


@dataclass(frozen=True)
class CamMessage:
    station_id: int
    gen_time: float
    body: KinematicReport


@dataclass(frozen=True)
class CpmMessage:
    station_id: int
    gen_time: float
    sender: KinematicReport
    sender_heading: float
    objects: tuple[PerceivedObject, ...] = ()

    def __post_init__(self) -> None:
        if len(self.objects) > MAX_OBJECTS:
            raise ValueError(f"objects exceeds cap ({len(self.objects)} > {MAX_OBJECTS})")


Payload = Union[CamMessage, CpmMessage]


@dataclass(frozen=True)
class SimEnvelope:
    payload: Payload
    true_sender: int
    falsified: bool
    rx_time: float

    def __post_init__(self) -> None:
        if self.falsified and not isinstance(self.payload, CamMessage):
            raise ValueError("only CAM payloads can be marked falsified")


def object_to_global(obj: PerceivedObject, sender: KinematicReport, sender_heading: float) -> KinematicReport:
    """Express a sender-relative perceived object in the receiver's working frame."""
    px, py = rotate(obj.rel_position[0], obj.rel_position[1], sender_heading)
    vx, vy = rotate(obj.rel_velocity[0], obj.rel_velocity[1], sender_heading)
    ax, ay = rotate(obj.rel_acceleration[0], obj.rel_acceleration[1], sender_heading)
    sp, sv, sa = sender
    return KinematicReport(
        LocalPoint(sp[0] + px, sp[1] + py),
        (sv[0] + vx, sv[1] + vy),
        (sa[0] + ax, sa[1] + ay),
    )


def global_to_object(target: KinematicReport, sender: KinematicReport, sender_heading: float) -> PerceivedObject:
    """Inverse of :func:`object_to_global`."""
    sp, sv, sa = sender
    tp, tv, ta = target
    return PerceivedObject(
        rotate(tp[0] - sp[0], tp[1] - sp[1], -sender_heading),
        rotate(tv[0] - sv[0], tv[1] - sv[1], -sender_heading),
        rotate(ta[0] - sa[0], ta[1] - sa[1], -sender_heading),
    )


# --- JSON-lines message log -------------------------------------------------


def _report_fields(r: KinematicReport) -> dict:
    return {"pos": list(r.position), "vel": list(r.velocity), "acc": list(r.acceleration)}


def encode_trace_record(env: SimEnvelope) -> str:
    """One JSON object per envelope, payload and ground truth side by side."""
    msg = env.payload
    if isinstance(msg, CamMessage):
        rec = {"type": "cam", "station_id": msg.station_id, "gen_time": msg.gen_time}
        rec.update(_report_fields(msg.body))
        rec["heading"] = None
        rec["objects"] = []
    else:
        rec = {"type": "cpm", "station_id": msg.station_id, "gen_time": msg.gen_time}
        rec.update(_report_fields(msg.sender))
        rec["heading"] = msg.sender_heading
        rec["objects"] = [
            {"pos": list(o.rel_position), "vel": list(o.rel_velocity), "acc": list(o.rel_acceleration)}
            for o in msg.objects
        ]
    rec["true_sender"] = env.true_sender
    rec["falsified"] = env.falsified
    rec["rx_time"] = env.rx_time
    return json.dumps(rec, separators=(",", ":"), allow_nan=False)


def _vec2(rec: dict, key: str) -> Vec2:
    v = rec[key]
    if not isinstance(v, list) or len(v) != 2:
        raise ValueError(f"field {key!r} must be a 2-element array")
    out = (float(v[0]), float(v[1]))
    if not all(math.isfinite(c) for c in out):
        raise ValueError(f"field {key!r} is not finite")
    return out


def _number(rec: dict, key: str) -> float:
    v = rec[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValueError(f"field {key!r} must be a number")
    return float(v)


def decode_trace_record(line: str, lineno: int | None = None) -> SimEnvelope:
    """Parse one log line back into a :class:`SimEnvelope`.

    Raises:
        TraceParseError: On malformed JSON, missing fields or violated invariants.
    """
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise TraceParseError(exc.msg, lineno, exc.colno) from None
    if not isinstance(rec, dict):
        raise TraceParseError("record is not a JSON object", lineno)
    try:
        kind = rec["type"]
        report = KinematicReport(LocalPoint(*_vec2(rec, "pos")), _vec2(rec, "vel"), _vec2(rec, "acc"))
        station_id = check_station_id(rec["station_id"])
        gen_time = _number(rec, "gen_time")
        if kind == "cam":
            payload: Payload = CamMessage(station_id, gen_time, report)
        elif kind == "cpm":
            raw_objects = rec["objects"]
            if not isinstance(raw_objects, list):
                raise ValueError("field 'objects' must be an array")
            if len(raw_objects) > MAX_OBJECTS:
                raise ValueError(f"objects exceeds cap ({len(raw_objects)} > {MAX_OBJECTS})")
            objects = tuple(
                PerceivedObject(_vec2(o, "pos"), _vec2(o, "vel"), _vec2(o, "acc")) for o in raw_objects
            )
            payload = CpmMessage(station_id, gen_time, report, _number(rec, "heading"), objects)
        else:
            raise ValueError(f"unknown message type {kind!r}")
        falsified = rec["falsified"]
        if not isinstance(falsified, bool):
            raise ValueError("field 'falsified' must be a boolean")
        true_sender = rec["true_sender"]
        if isinstance(true_sender, bool) or not isinstance(true_sender, int):
            raise ValueError("field 'true_sender' must be an integer")
        return SimEnvelope(payload, true_sender, falsified, _number(rec, "rx_time"))
    except KeyError as exc:
        raise TraceParseError(f"missing field {exc.args[0]!r}", lineno) from None
    except (TypeError, ValueError) as exc:
        raise TraceParseError(str(exc), lineno) from None
