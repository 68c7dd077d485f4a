"""Trace replay from floating-car-data style records.

Accepted layouts, one record per vehicle and timestamp:

* CSV with a header row;
* JSON lines, one object per line with the same keys.

Keys: ``t``, ``veh`` (or ``id``), either ``x``/``y`` (metres) or
``lat``/``lon`` (degrees), ``speed`` (m/s), ``heading`` (radians CCW from
east) or ``angle`` (SUMO style, degrees clockwise from north), and either a
scalar longitudinal ``accel`` or an ``ax``/``ay`` vector.  Missing
acceleration means zero.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from mbdsim.geo import GeoOrigin, InvalidInput, latlon_to_local
from mbdsim.messages import TraceParseError
from mbdsim.scenario.model import PSEUDONYM_PERIOD, Scenario, Trajectory, ValidationError, random_phases


def _records(path: Path):
    text = path.read_text()
    first = text.lstrip()[:1]
    if path.suffix in (".jsonl", ".ndjson") or first == "{":
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceParseError(exc.msg, lineno, exc.colno) from None
            if not isinstance(rec, dict):
                raise TraceParseError("record is not an object", lineno)
            yield lineno, rec
    else:
        reader = csv.DictReader(text.splitlines())
        for rec in reader:
            yield reader.line_num, rec


def _num(rec: dict, key: str, lineno: int) -> float:
    try:
        value = float(rec[key])
    except KeyError:
        raise TraceParseError(f"missing column {key!r}", lineno) from None
    except (TypeError, ValueError):
        raise TraceParseError(f"column {key!r} is not a number: {rec[key]!r}", lineno) from None
    if not math.isfinite(value):
        raise TraceParseError(f"column {key!r} is not finite", lineno)
    return value


def _has(rec: dict, key: str) -> bool:
    return rec.get(key) not in (None, "")


def load_trace(
    path: str | Path,
    origin: GeoOrigin | None = None,
    dt: float = 0.1,
    seed: int = 0,
    pseudonym_period: float = PSEUDONYM_PERIOD,
) -> Scenario:
    """Read a trace file into a :class:`Scenario`.

    Raises:
        FileNotFoundError: If ``path`` does not exist.
        TraceParseError: On a malformed record (carries the line number).
        ValidationError: On negative speed or per-vehicle time going backwards.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"trace file not found: {path}")
    rows: dict[str, list[tuple]] = {}
    for lineno, rec in _records(path):
        veh = rec.get("veh", rec.get("id"))
        if veh in (None, ""):
            raise TraceParseError("missing vehicle id column ('veh' or 'id')", lineno)
        t = _num(rec, "t", lineno)
        if _has(rec, "lat") or _has(rec, "lon"):
            if origin is None:
                raise TraceParseError("lat/lon record but no projection origin given", lineno)
            try:
                x, y = latlon_to_local(_num(rec, "lat", lineno), _num(rec, "lon", lineno), origin)
            except InvalidInput as exc:
                raise TraceParseError(str(exc), lineno) from None
        else:
            x, y = _num(rec, "x", lineno), _num(rec, "y", lineno)
        speed = _num(rec, "speed", lineno)
        if speed < 0:
            raise ValidationError(f"line {lineno}: negative speed {speed}")
        if _has(rec, "heading"):
            heading = _num(rec, "heading", lineno)
        elif _has(rec, "angle"):
            heading = math.radians(90.0 - _num(rec, "angle", lineno))
        else:
            raise TraceParseError("missing column 'heading' (or 'angle')", lineno)
        heading = heading % (2.0 * math.pi)
        if _has(rec, "ax") or _has(rec, "ay"):
            ax, ay = _num(rec, "ax", lineno), _num(rec, "ay", lineno)
        else:
            along = _num(rec, "accel", lineno) if _has(rec, "accel") else 0.0
            ax, ay = along * math.cos(heading), along * math.sin(heading)
        samples = rows.setdefault(str(veh), [])
        if samples and t <= samples[-1][0]:
            raise ValidationError(f"line {lineno}: time {t} for vehicle {veh} does not advance")
        samples.append((t, x, y, heading, speed, ax, ay))

    names = list(rows)
    vehicles = []
    for name in names:
        cols = np.array(rows[name], dtype=float).T
        vehicles.append(Trajectory(*cols))
    duration = max((v.despawn for v in vehicles), default=0.0)
    n = len(vehicles)
    return Scenario(
        duration=duration,
        dt=dt,
        vehicles=tuple(vehicles),
        attacker_flags=(False,) * n,
        pseudonym_phase=random_phases(n, pseudonym_period, seed),
        seed=seed,
        pseudonym_period=pseudonym_period,
        meta={"generator": "trace", "source": str(path), "vehicle_ids": names},
    )
