"""Position-falsification attacker model."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import TYPE_CHECKING

import numpy as np

from mbdsim.geo import EARTH_RADIUS_M, LocalPoint
from mbdsim.messages import CamMessage

if TYPE_CHECKING:
    from mbdsim.scenario.model import Scenario

OFFSET_MODES = ("meters", "degrees")


@dataclass(frozen=True)
class AttackConfig:
    """Who attacks and how far the falsified positions are pushed.

    In ``meters`` mode the offset has a uniform magnitude in
    ``[offset_min, offset_max]`` and a uniform direction.  ``degrees`` mode
    instead adds or subtracts a uniform ``[deg_min, deg_max]`` to latitude
    and longitude independently, at reference latitude ``lat0``.
    """

    attacker_ratio: float = 0.10
    falsify_prob: float = 0.30
    offset_min: float = 3.0
    offset_max: float = 40.0
    offset_mode: str = "meters"
    deg_min: float = 0.00003
    deg_max: float = 0.00030
    lat0: float = 49.6

    def __post_init__(self) -> None:
        for name in ("attacker_ratio", "falsify_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if not 0.0 < self.offset_min <= self.offset_max:
            raise ValueError(f"need 0 < offset_min <= offset_max, got {self.offset_min}, {self.offset_max}")
        if not 0.0 < self.deg_min <= self.deg_max:
            raise ValueError("need 0 < deg_min <= deg_max")
        if self.offset_mode not in OFFSET_MODES:
            raise ValueError(f"offset_mode must be one of {OFFSET_MODES}, got {self.offset_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> AttackConfig:
        return cls(**d)


def assign_roles(scenario: Scenario, cfg: AttackConfig, seed: int | None = None) -> Scenario:
    """Flag each vehicle as attacker independently with ``cfg.attacker_ratio``."""
    from mbdsim.scenario.model import STREAM_ROLES

    seed = scenario.seed if seed is None else seed
    rng = np.random.default_rng([seed, STREAM_ROLES])
    draws = rng.random(scenario.n_vehicles)
    flags = tuple(bool(u < cfg.attacker_ratio) for u in draws)
    return scenario.with_(attacker_flags=flags, attack=cfg)


def _offset(cfg: AttackConfig, rng: np.random.Generator) -> tuple[float, float]:
    if cfg.offset_mode == "meters":
        magnitude = rng.uniform(cfg.offset_min, cfg.offset_max)
        angle = rng.uniform(0.0, 2.0 * math.pi)
        return magnitude * math.cos(angle), magnitude * math.sin(angle)
    d_lat = rng.uniform(cfg.deg_min, cfg.deg_max) * (1.0 if rng.random() < 0.5 else -1.0)
    d_lon = rng.uniform(cfg.deg_min, cfg.deg_max) * (1.0 if rng.random() < 0.5 else -1.0)
    dy = EARTH_RADIUS_M * math.radians(d_lat)
    dx = EARTH_RADIUS_M * math.cos(math.radians(cfg.lat0)) * math.radians(d_lon)
    return dx, dy


def falsify_position(cam: CamMessage, cfg: AttackConfig, rng: np.random.Generator) -> tuple[CamMessage, bool]:
    """Maybe shift the CAM's reported position; returns ``(cam, falsified)``.

    Velocity and acceleration are never touched.
    """
    if not rng.random() < cfg.falsify_prob:
        return cam, False
    dx, dy = _offset(cfg, rng)
    body = cam.body
    moved = body._replace(position=LocalPoint(body.position[0] + dx, body.position[1] + dy))
    return replace(cam, body=moved), True
