"""Planar working frame, geodetic ingestion and sector geometry.

All internal positions are metres in a local east/north tangent plane.
Degrees only show up at trace ingestion and in degree-mode attack offsets.
"""

from __future__ import annotations

import math
from typing import NamedTuple

EARTH_RADIUS_M = 6_371_000.0
TWO_PI = 2.0 * math.pi
_MAX_COORD = 1e7


class InvalidInput(ValueError):
    """Raised for out-of-range geodetic or geometric inputs."""


class LocalPoint(NamedTuple):
    x: float  # metres east
    y: float  # metres north


class GeoOrigin(NamedTuple):
    lat0: float
    lon0: float


class Pose(NamedTuple):
    position: LocalPoint
    heading: float  # radians CCW from +x, in [0, 2pi)


def normalize_angle(theta: float) -> float:
    """Wrap an angle into [0, 2pi)."""
    wrapped = math.fmod(theta, TWO_PI)
    if wrapped < 0.0:
        wrapped += TWO_PI
    # fmod of a tiny negative value can round up to exactly 2pi
    if wrapped >= TWO_PI:
        wrapped = 0.0
    return wrapped


def make_pose(x: float, y: float, heading: float) -> Pose:
    return Pose(LocalPoint(float(x), float(y)), normalize_angle(heading))


def check_point(p: LocalPoint) -> LocalPoint:
    if not (math.isfinite(p.x) and math.isfinite(p.y)):
        raise InvalidInput(f"non-finite point {p}")
    if abs(p.x) >= _MAX_COORD or abs(p.y) >= _MAX_COORD:
        raise InvalidInput(f"point {p} outside the working frame")
    return p


def _check_latlon(lat: float, lon: float) -> None:
    if not (math.isfinite(lat) and math.isfinite(lon)):
        raise InvalidInput(f"non-finite coordinate ({lat}, {lon})")
    if abs(lat) > 90.0:
        raise InvalidInput(f"latitude {lat} outside [-90, 90]")
    if abs(lon) > 180.0:
        raise InvalidInput(f"longitude {lon} outside [-180, 180]")


def latlon_to_local(lat: float, lon: float, origin: GeoOrigin) -> LocalPoint:
    """Equirectangular projection of a geodetic point around ``origin``.

    Args:
        lat: Latitude in degrees.
        lon: Longitude in degrees.
        origin: Projection anchor.

    Returns:
        Point in metres east/north of the anchor.

    Raises:
        InvalidInput: If any coordinate is out of range.
    """
    _check_latlon(lat, lon)
    _check_latlon(origin.lat0, origin.lon0)
    x = EARTH_RADIUS_M * math.cos(math.radians(origin.lat0)) * math.radians(lon - origin.lon0)
    y = EARTH_RADIUS_M * math.radians(lat - origin.lat0)
    return LocalPoint(x, y)


def local_to_latlon(p: LocalPoint, origin: GeoOrigin) -> tuple[float, float]:
    """Inverse of :func:`latlon_to_local`; returns ``(lat, lon)`` in degrees."""
    _check_latlon(origin.lat0, origin.lon0)
    cos_lat0 = math.cos(math.radians(origin.lat0))
    if cos_lat0 <= 0.0:
        raise InvalidInput("projection anchor at a pole")
    lat = origin.lat0 + math.degrees(p.y / EARTH_RADIUS_M)
    lon = origin.lon0 + math.degrees(p.x / (EARTH_RADIUS_M * cos_lat0))
    return lat, lon


def distance(a: LocalPoint, b: LocalPoint) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def angle_diff(a: float, b: float) -> float:
    """Smallest absolute angle between two headings, in [0, pi]."""
    d = abs(math.fmod(a - b, TWO_PI))
    return TWO_PI - d if d > math.pi else d


def in_sector(target: LocalPoint, sensor_pose: Pose, fov: float, range_m: float) -> bool:
    """Whether ``target`` lies inside a sensor's circular sector.

    Boundaries are inclusive, on both the range and the half-angle.
    A full-circle sensor (``fov >= 2pi``) ignores bearing entirely.
    """
    px, py = sensor_pose.position
    dx = target[0] - px
    dy = target[1] - py
    d = math.hypot(dx, dy)
    if d > range_m:
        return False
    if fov >= TWO_PI or d == 0.0:
        return True
    bearing = math.atan2(dy, dx)
    # small slack so a target placed at exactly +-fov/2 survives atan2 rounding
    return angle_diff(bearing, sensor_pose.heading) <= fov / 2.0 + 1e-12


def rotate(vx: float, vy: float, theta: float) -> tuple[float, float]:
    c = math.cos(theta)
    s = math.sin(theta)
    return c * vx - s * vy, s * vx + c * vy
