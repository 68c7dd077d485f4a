"""A receiver's list of Kalman filters, keyed by the station id each is bound to.

Tracks born from perceived CPM objects carry no id until a CAM claims them.
Freshness (``now - last_update <= t_stale``) gates every lookup and match;
``sweep`` physically drops what has gone stale.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass
from typing import Iterator

from mbdsim import kalman
from mbdsim.kalman import FilterParams, FilterState
from mbdsim.messages import KinematicReport


class ConsistencyError(RuntimeError):
    """Registry invariant violated.  Signals a simulation bug, not an attack."""


class TrackOrigin(enum.Enum):
    CAM_DIRECT = "CamDirect"
    CPM_PERCEIVED = "CpmPerceived"


@dataclass
class Track:
    filter: FilterState
    bound_id: int | None
    origin: TrackOrigin
    created_at: float
    serial: int = 0

    def age(self, now: float) -> float:
        return now - self.filter.last_update


@dataclass(frozen=True)
class Match:
    track: Track
    d_pos: float
    d_vel: float


class TrackRegistry:
    def __init__(self, params: FilterParams | None = None):
        self.params = params or FilterParams()
        self._tracks: dict[int, Track] = {}
        self._by_id: dict[int, Track] = {}
        self._serials = itertools.count(1)

    def __len__(self) -> int:
        return len(self._tracks)

    def __iter__(self) -> Iterator[Track]:
        return iter(list(self._tracks.values()))

    def is_fresh(self, track: Track, now: float) -> bool:
        return now - track.filter.last_update <= self.params.t_stale

    def fresh_tracks(self, now: float) -> list[Track]:
        limit = self.params.t_stale
        return [t for t in self._tracks.values() if now - t.filter.last_update <= limit]

    def lookup(self, station_id: int, now: float) -> Track | None:
        """Track bound to ``station_id``, or ``None`` if absent or stale."""
        track = self._by_id.get(station_id)
        if track is None or now - track.filter.last_update > self.params.t_stale:
            return None
        return track

    def best_match(self, measurement: KinematicReport, accel, now: float) -> Match | None:
        """Fresh track whose prediction is closest to ``measurement``.

        Ordered by position residual, then velocity residual, then track age
        (older first).  Plausibility against the gates is left to the caller.
        """
        (mx, my), (mvx, mvy), _ = measurement
        ax, ay = accel
        hypot = math.hypot
        limit = self.params.t_stale
        best = None
        best_pos = math.inf
        best_key = None
        for track in self._tracks.values():
            f = track.filter
            dt = now - f.last_update
            if dt > limit:
                continue
            px, py, vx, vy = f.mean
            # same arithmetic as kalman.predicted_mean, velocity only when needed
            if dt > 0:
                half = 0.5 * dt * dt
                ex = mx - (px + vx * dt + ax * half)
                # |ex| alone already rules out most far tracks
                if abs(ex) > best_pos:
                    continue
                d_pos = hypot(ex, my - (py + vy * dt + ay * half))
            else:
                d_pos = hypot(mx - px, my - py)
            if d_pos > best_pos:
                continue
            if dt > 0:
                vx, vy = vx + ax * dt, vy + ay * dt
            key = (d_pos, hypot(mvx - vx, mvy - vy), track.created_at, track.serial)
            if best_key is None or key < best_key:
                best, best_key, best_pos = track, key, d_pos
        if best is None:
            return None
        return Match(best, best_key[0], best_key[1])

    def _claim_id(self, station_id: int, now: float, owner: Track | None = None) -> None:
        holder = self._by_id.get(station_id)
        if holder is None or holder is owner:
            return
        if self.is_fresh(holder, now):
            raise ConsistencyError(f"station id {station_id} already bound to a fresh track")
        # a stale holder is as good as gone; drop it so the id can move
        self._remove(holder)

    def _remove(self, track: Track) -> None:
        del self._tracks[track.serial]
        if track.bound_id is not None and self._by_id.get(track.bound_id) is track:
            del self._by_id[track.bound_id]

    def update_track(self, track: Track, measurement: KinematicReport, now: float) -> None:
        track.filter = kalman.step(track.filter, measurement, now, self.params)

    def rebind(self, track: Track, new_id: int, measurement: KinematicReport, now: float) -> None:
        """Move ``track`` to ``new_id`` and fuse ``measurement``.

        Raises:
            ConsistencyError: If ``new_id`` is bound to another fresh track.
        """
        if self._tracks.get(track.serial) is not track:
            raise ConsistencyError("track is not held by this registry")
        self._claim_id(new_id, now, owner=track)
        new_filter = kalman.step(track.filter, measurement, now, self.params)
        if track.bound_id is not None and self._by_id.get(track.bound_id) is track:
            del self._by_id[track.bound_id]
        track.bound_id = new_id
        track.filter = new_filter
        self._by_id[new_id] = track

    def insert_new(
        self,
        measurement: KinematicReport,
        station_id: int | None,
        origin: TrackOrigin,
        now: float,
    ) -> Track:
        """Start a new filter from ``measurement``.

        Raises:
            ConsistencyError: If ``station_id`` is bound to a fresh track.
        """
        if station_id is not None:
            self._claim_id(station_id, now)
        track = Track(
            filter=kalman.init(measurement, now, self.params),
            bound_id=station_id,
            origin=origin,
            created_at=now,
            serial=next(self._serials),
        )
        self._tracks[track.serial] = track
        if station_id is not None:
            self._by_id[station_id] = track
        return track

    def sweep(self, now: float) -> int:
        """Drop every stale track; returns how many went."""
        limit = self.params.t_stale
        stale = [t for t in self._tracks.values() if now - t.filter.last_update > limit]
        for track in stale:
            self._remove(track)
        return len(stale)

    def snapshot(self) -> list[tuple]:
        """Comparable view of the full registry contents (for tests and audits)."""
        return [
            (
                t.serial,
                t.bound_id,
                t.origin,
                t.created_at,
                t.filter.last_update,
                t.filter.mean,
                t.filter.cov_x,
                t.filter.cov_y,
            )
            for t in self._tracks.values()
        ]
