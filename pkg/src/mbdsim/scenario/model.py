"""Ground-truth world model: trajectories, roles and pseudonym schedules."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from mbdsim.scenario.attack import AttackConfig

PSEUDONYM_PERIOD = 100.0

# independent RNG streams, mixed into every SeedSequence with the scenario seed
STREAM_MOBILITY = 1
STREAM_SPAWN = 2
STREAM_ROLES = 3
STREAM_PHASE = 4
STREAM_FALSIFY = 5
STREAM_RADIO_CAM = 6
STREAM_RADIO_CPM = 7
STREAM_JITTER = 8


class ValidationError(ValueError):
    """Scenario content violates an invariant (ordering, physical ranges)."""


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Time-indexed ground truth of one physical vehicle.

    Arrays share one length; ``heading`` is radians CCW from east and
    ``ax``/``ay`` is the full acceleration vector (tangential plus
    centripetal).
    """

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    heading: np.ndarray
    speed: np.ndarray
    ax: np.ndarray
    ay: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.t)
        if n == 0:
            raise ValidationError("trajectory has no samples")
        for name in ("x", "y", "heading", "speed", "ax", "ay"):
            if len(getattr(self, name)) != n:
                raise ValidationError(f"trajectory column {name!r} has the wrong length")
        if n > 1 and not np.all(np.diff(self.t) > 0):
            raise ValidationError("trajectory samples are not strictly time-ordered")
        if np.any(self.speed < 0):
            raise ValidationError("negative speed in trajectory")

    @property
    def spawn(self) -> float:
        return float(self.t[0])

    @property
    def despawn(self) -> float:
        return float(self.t[-1])

    def __len__(self) -> int:
        return len(self.t)

    def same_as(self, other: Trajectory) -> bool:
        return all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("t", "x", "y", "heading", "speed", "ax", "ay")
        )

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("t", "x", "y", "heading", "speed", "ax", "ay")}

    @classmethod
    def from_dict(cls, d: dict) -> Trajectory:
        return cls(**{k: np.asarray(d[k], dtype=float) for k in ("t", "x", "y", "heading", "speed", "ax", "ay")})


def _pseudonym_hash(seed: int, vehicle: int, epoch: int, salt: int) -> int:
    digest = hashlib.blake2b(f"{seed}:{vehicle}:{epoch}:{salt}".encode(), digest_size=4).digest()
    return int.from_bytes(digest, "big")


@dataclass(frozen=True, eq=False)
class Scenario:
    duration: float
    dt: float
    vehicles: tuple[Trajectory, ...]
    attacker_flags: tuple[bool, ...]
    pseudonym_phase: tuple[float, ...]
    seed: int
    pseudonym_period: float = PSEUDONYM_PERIOD
    attack: AttackConfig = field(default_factory=AttackConfig)
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        # normalise so that serialisation does not depend on int vs float input
        for name in ("duration", "dt", "pseudonym_period"):
            object.__setattr__(self, name, float(getattr(self, name)))
        n = len(self.vehicles)
        if len(self.attacker_flags) != n or len(self.pseudonym_phase) != n:
            raise ValidationError("per-vehicle columns disagree in length")
        if not (self.dt > 0 and self.duration >= 0):
            raise ValidationError("need dt > 0 and duration >= 0")
        if not self.pseudonym_period > 0:
            raise ValidationError("pseudonym period must be positive")

    @property
    def n_vehicles(self) -> int:
        return len(self.vehicles)

    def with_(self, **changes) -> Scenario:
        return replace(self, **changes)

    # --- pseudonyms -----------------------------------------------------

    def epoch(self, vehicle: int, t: float) -> int:
        return math.floor((t + self.pseudonym_phase[vehicle]) / self.pseudonym_period)

    @cached_property
    def _pseudonym_table(self) -> dict[tuple[int, int], int]:
        # Global uniqueness across every (vehicle, epoch), assigned in a fixed
        # order so that the rehash on collision is reproducible.
        table: dict[tuple[int, int], int] = {}
        used: set[int] = set()
        for v, traj in enumerate(self.vehicles):
            first = self.epoch(v, traj.spawn)
            last = self.epoch(v, traj.despawn)
            for e in range(first, last + 1):
                salt = 0
                while True:
                    sid = _pseudonym_hash(self.seed, v, e, salt)
                    if sid != 0 and sid not in used:
                        break
                    salt += 1
                used.add(sid)
                table[(v, e)] = sid
        return table

    def pseudonym_at(self, vehicle: int, t: float) -> int:
        """Station id used by ``vehicle`` at time ``t`` (within its lifetime)."""
        key = (vehicle, self.epoch(vehicle, t))
        try:
            return self._pseudonym_table[key]
        except KeyError:
            raise ValueError(f"t={t} is outside the lifetime of vehicle {vehicle}") from None

    # --- serialisation --------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "header": {
                "duration": self.duration,
                "dt": self.dt,
                "seed": self.seed,
                "pseudonym_period": self.pseudonym_period,
                "attack_cfg": self.attack.to_dict(),
                "meta": self.meta,
            },
            "vehicles": [
                {"index": i, "attacker": bool(a), "phase": p, **traj.to_dict()}
                for i, (traj, a, p) in enumerate(zip(self.vehicles, self.attacker_flags, self.pseudonym_phase))
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"), allow_nan=False)

    @classmethod
    def from_dict(cls, d: dict) -> Scenario:
        h = d["header"]
        vehicles = d["vehicles"]
        return cls(
            duration=float(h["duration"]),
            dt=float(h["dt"]),
            vehicles=tuple(Trajectory.from_dict(v) for v in vehicles),
            attacker_flags=tuple(bool(v["attacker"]) for v in vehicles),
            pseudonym_phase=tuple(float(v["phase"]) for v in vehicles),
            seed=int(h["seed"]),
            pseudonym_period=float(h.get("pseudonym_period", PSEUDONYM_PERIOD)),
            attack=AttackConfig.from_dict(h.get("attack_cfg", {})),
            meta=dict(h.get("meta", {})),
        )

    @classmethod
    def from_json(cls, text: str) -> Scenario:
        return cls.from_dict(json.loads(text))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> Scenario:
        return cls.from_json(Path(path).read_text())

    def same_as(self, other: Scenario) -> bool:
        return self.to_json() == other.to_json()

    # --- statistics -----------------------------------------------------

    def concurrency(self, step: float = 1.0) -> np.ndarray:
        """Number of live vehicles sampled every ``step`` seconds."""
        times = np.arange(0.0, self.duration + 1e-9, step)
        counts = np.zeros(len(times), dtype=int)
        for traj in self.vehicles:
            counts += (times >= traj.spawn) & (times <= traj.despawn)
        return counts


def random_phases(n: int, period: float, seed: int) -> tuple[float, ...]:
    rng = np.random.default_rng([seed, STREAM_PHASE])
    return tuple(float(p) for p in rng.uniform(0.0, period, n))
