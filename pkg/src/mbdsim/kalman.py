"""Per-neighbour Kalman filter over (px, py, vx, vy).

Acceleration is an exogenous control input rather than a state component:
each report's acceleration drives the prediction that is then compared with
(and fused into) the same report.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from mbdsim.geo import InvalidInput
from mbdsim.messages import KinematicReport


class TemporalOrderError(ValueError):
    """A measurement is older than the filter's last update."""


@dataclass(frozen=True)
class FilterParams:
    """Filter noise, gating and staleness settings.

    ``q`` is the continuous white-noise acceleration density (m^2/s^3).
    """

    q: float = 0.5
    sigma_pos: float = 1.0
    sigma_vel: float = 0.5
    theta_pos: float = 5.0
    theta_vel: float = 3.0
    t_stale: float = 2.0

    def __post_init__(self) -> None:
        for name in ("q", "sigma_pos", "sigma_vel", "theta_pos", "theta_vel", "t_stale"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise InvalidInput(f"{name} must be a positive finite number, got {value!r}")

    def measurement_noise(self) -> np.ndarray:
        return _measurement_noise(self.sigma_pos, self.sigma_vel)


Axis = tuple  # (p_pp, p_pv, p_vv): one axis' symmetric 2x2 position/velocity block


@dataclass(frozen=True, eq=False)
class FilterState:
    """Mean ``(px, py, vx, vy)`` and covariance, stored per axis.

    With a diagonal measurement noise and per-axis process noise the x and y
    axes never correlate, so the 4x4 covariance is two independent 2x2
    blocks.  ``covariance`` rebuilds the full matrix on demand.
    """

    mean: tuple[float, float, float, float]
    cov_x: Axis
    cov_y: Axis
    last_update: float

    @property
    def covariance(self) -> np.ndarray:
        xa, xb, xc = self.cov_x
        ya, yb, yc = self.cov_y
        return np.array(
            [
                [xa, 0.0, xb, 0.0],
                [0.0, ya, 0.0, yb],
                [xb, 0.0, xc, 0.0],
                [0.0, yb, 0.0, yc],
            ]
        )

    @classmethod
    def from_arrays(cls, mean, covariance, last_update: float) -> FilterState:
        """Build a state from a 4-vector and a 4x4 covariance.

        Raises:
            InvalidInput: If the covariance couples the x and y axes or is not symmetric.
        """
        m = np.asarray(mean, dtype=float).reshape(4)
        c = np.asarray(covariance, dtype=float).reshape(4, 4)
        if not np.array_equal(c, c.T):
            raise InvalidInput("covariance must be symmetric")
        cross = c[np.ix_([0, 2], [1, 3])]
        if np.any(cross != 0.0):
            raise InvalidInput("covariance must not couple the x and y axes")
        return cls(
            tuple(float(v) for v in m),
            (float(c[0, 0]), float(c[0, 2]), float(c[2, 2])),
            (float(c[1, 1]), float(c[1, 3]), float(c[3, 3])),
            float(last_update),
        )

    def same_as(self, other: FilterState) -> bool:
        """Bit-level equality of mean, covariance and timestamp."""
        return (
            self.last_update == other.last_update
            and self.mean == other.mean
            and self.cov_x == other.cov_x
            and self.cov_y == other.cov_y
        )


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@lru_cache(maxsize=8)
def _measurement_noise(sigma_pos: float, sigma_vel: float) -> np.ndarray:
    return _frozen(np.diag([sigma_pos**2, sigma_pos**2, sigma_vel**2, sigma_vel**2]))


def transition_matrix(dt: float) -> np.ndarray:
    f = np.eye(4)
    f[0, 2] = f[1, 3] = dt
    return f


def process_noise(dt: float, q: float) -> np.ndarray:
    """Discretised white-noise-acceleration covariance for one step of ``dt``."""
    a, b, c = _axis_noise(dt, q)
    return np.array(
        [
            [a, 0.0, b, 0.0],
            [0.0, a, 0.0, b],
            [b, 0.0, c, 0.0],
            [0.0, b, 0.0, c],
        ]
    )


def _axis_noise(dt: float, q: float) -> Axis:
    return (q * dt**3 / 3.0, q * dt**2 / 2.0, q * dt)


def init(measurement: KinematicReport, t: float, params: FilterParams) -> FilterState:
    (px, py), (vx, vy), _ = measurement
    mean = (float(px), float(py), float(vx), float(vy))
    if not all(math.isfinite(v) for v in mean):
        raise InvalidInput("cannot start a filter from a non-finite measurement")
    rp = params.sigma_pos**2
    rv = params.sigma_vel**2
    return FilterState(mean, (rp, 0.0, rv), (rp, 0.0, rv), float(t))


def predicted_mean(mean, accel, dt: float) -> tuple[float, float, float, float]:
    """Constant-acceleration propagation of the mean only."""
    px, py, vx, vy = mean
    ax, ay = accel
    half = 0.5 * dt * dt
    return (px + vx * dt + ax * half, py + vy * dt + ay * half, vx + ax * dt, vy + ay * dt)


def _predict_axis(cov: Axis, dt: float, noise: Axis) -> Axis:
    a, b, c = cov
    qa, qb, qc = noise
    return (a + 2.0 * b * dt + c * dt * dt + qa, b + c * dt + qb, c + qc)


def predict(state: FilterState, accel, dt: float, params: FilterParams) -> FilterState:
    """Propagate mean and covariance forward by ``dt`` seconds.

    Raises:
        InvalidInput: If ``dt`` is not strictly positive.
    """
    if not dt > 0:
        raise InvalidInput(f"prediction step must be positive, got dt={dt!r}")
    noise = _axis_noise(dt, params.q)
    return FilterState(
        predicted_mean(state.mean, accel, dt),
        _predict_axis(state.cov_x, dt, noise),
        _predict_axis(state.cov_y, dt, noise),
        state.last_update + dt,
    )


def _update_axis(mp: float, mv: float, zp: float, zv: float, cov: Axis, r1: float, r2: float):
    """Joseph-form update of one axis; returns ``(mp, mv, cov)``."""
    a, b, c = cov
    sa, sc = a + r1, c + r2
    det = sa * sc - b * b
    # K = P S^-1
    k11 = (a * sc - b * b) / det
    k12 = b * r1 / det
    k21 = b * r2 / det
    k22 = (c * sa - b * b) / det
    ip, iv = zp - mp, zv - mv
    mp2 = mp + k11 * ip + k12 * iv
    mv2 = mv + k21 * ip + k22 * iv
    # (I - K) P (I - K)^T + K R K^T
    a11, a12, a21, a22 = 1.0 - k11, -k12, -k21, 1.0 - k22
    p11 = a11 * a + a12 * b
    p12 = a11 * b + a12 * c
    p21 = a21 * a + a22 * b
    p22 = a21 * b + a22 * c
    n11 = p11 * a11 + p12 * a12 + k11 * k11 * r1 + k12 * k12 * r2
    n12 = p11 * a21 + p12 * a22 + k11 * k21 * r1 + k12 * k22 * r2
    n21 = p21 * a11 + p22 * a12 + k21 * k11 * r1 + k22 * k12 * r2
    n22 = p21 * a21 + p22 * a22 + k21 * k21 * r1 + k22 * k22 * r2
    return mp2, mv2, (n11, 0.5 * (n12 + n21), n22)


def update(state: FilterState, measurement: KinematicReport, t: float, params: FilterParams) -> FilterState:
    """Fuse a direct observation of (px, py, vx, vy) taken at time ``t``.

    The state is expected to already be predicted to ``t``; only the
    timestamp is checked here.  Uses the Joseph form so the covariance
    stays symmetric positive-definite.

    Raises:
        TemporalOrderError: If ``t`` precedes the filter's last update.
    """
    if t < state.last_update:
        raise TemporalOrderError(f"measurement at t={t} precedes last update {state.last_update}")
    (zx, zy), (zvx, zvy), _ = measurement
    px, py, vx, vy = state.mean
    r1 = params.sigma_pos**2
    r2 = params.sigma_vel**2
    px, vx, cx = _update_axis(px, vx, zx, zvx, state.cov_x, r1, r2)
    py, vy, cy = _update_axis(py, vy, zy, zvy, state.cov_y, r1, r2)
    return FilterState((px, py, vx, vy), cx, cy, float(t))


def step(state: FilterState, measurement: KinematicReport, t: float, params: FilterParams) -> FilterState:
    """Predict to ``t`` with the report's own acceleration, then update.

    Same arithmetic as :func:`predict` followed by :func:`update`, without
    the intermediate state object.
    """
    dt = t - state.last_update
    if dt < 0:
        raise TemporalOrderError(f"measurement at t={t} precedes last update {state.last_update}")
    (zx, zy), (zvx, zvy), accel = measurement
    cx, cy = state.cov_x, state.cov_y
    if dt > 0:
        px, py, vx, vy = predicted_mean(state.mean, accel, dt)
        noise = _axis_noise(dt, params.q)
        cx = _predict_axis(cx, dt, noise)
        cy = _predict_axis(cy, dt, noise)
    else:
        px, py, vx, vy = state.mean
    r1 = params.sigma_pos**2
    r2 = params.sigma_vel**2
    px, vx, cx = _update_axis(px, vx, zx, zvx, cx, r1, r2)
    py, vy, cy = _update_axis(py, vy, zy, zvy, cy, r1, r2)
    return FilterState((px, py, vx, vy), cx, cy, float(t))


def residual(state: FilterState, measurement: KinematicReport, accel, dt: float) -> tuple[float, float]:
    """Position and velocity residual norms against the mean predicted ``dt`` ahead.

    ``dt == 0`` compares against the current mean.
    """
    if dt > 0:
        px, py, vx, vy = predicted_mean(state.mean, accel, dt)
    else:
        px, py, vx, vy = state.mean
    (mx, my), (mvx, mvy), _ = measurement
    return math.hypot(mx - px, my - py), math.hypot(mvx - vx, mvy - vy)


def residual_between(a: KinematicReport, b: KinematicReport) -> tuple[float, float]:
    """Position and velocity residual norms between two simultaneous reports."""
    (ax_, ay_), (avx, avy), _ = a
    (bx_, by_), (bvx, bvy), _ = b
    return math.hypot(ax_ - bx_, ay_ - by_), math.hypot(avx - bvx, avy - bvy)


def deviation(
    state: FilterState, measurement: KinematicReport, accel, dt: float, params: FilterParams
) -> tuple[float, float]:
    """Residual norms ``(d_pos, d_vel)`` of a measurement against the prediction.

    Nothing is mutated; the state is only propagated for comparison.

    Raises:
        InvalidInput: If ``dt`` is not strictly positive.
    """
    if not dt > 0:
        raise InvalidInput(f"prediction step must be positive, got dt={dt!r}")
    return residual(state, measurement, accel, dt)


def plausible(d_pos: float, d_vel: float, params: FilterParams) -> bool:
    return d_pos <= params.theta_pos and d_vel <= params.theta_vel
