"""Unit-disk radio with independent per-link loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RadioConfig:
    r_max: float = 400.0
    p_loss: float = 0.05
    d_margin: float = 50.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.p_loss < 1.0:
            raise ValueError(f"p_loss must lie in [0, 1), got {self.p_loss}")
        if not 0.0 < self.d_margin < self.r_max:
            raise ValueError(f"need 0 < d_margin < r_max, got d_margin={self.d_margin}, r_max={self.r_max}")
        if not math.isfinite(self.r_max):
            raise ValueError("r_max must be finite")

    @property
    def margin_inner(self) -> float:
        return self.r_max - self.d_margin


def deliver(
    sender: int,
    positions: np.ndarray,
    present: np.ndarray,
    radio: RadioConfig,
    rng: np.random.Generator,
) -> list[int]:
    """Receivers of one transmission.

    Args:
        sender: Row of the transmitting vehicle in ``positions``.
        positions: ``(n, 2)`` array of current vehicle positions.
        present: Boolean mask of vehicles currently in the world.
        radio: Range and loss settings.
        rng: Stream for the loss draws; exactly one draw per in-range receiver.

    Returns:
        Indices of vehicles that receive the message, ascending.  The range
        boundary is inclusive.
    """
    d = np.hypot(positions[:, 0] - positions[sender, 0], positions[:, 1] - positions[sender, 1])
    in_range = present & (d <= radio.r_max)
    in_range[sender] = False
    idx = np.flatnonzero(in_range)
    if radio.p_loss > 0.0 and idx.size:
        keep = rng.random(idx.size) >= radio.p_loss
        idx = idx[keep]
    return idx.tolist()
