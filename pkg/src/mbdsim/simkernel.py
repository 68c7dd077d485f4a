"""Fixed-step simulation loop.

Per step: advance ground truth; emit due CAMs (attackers falsify) and CPMs;
deliver over the unit-disk radio; let every receiver verify its inbox in
``(rx_time, station id, CAM before CPM)`` order; sweep stale tracks; score.

All random draws happen on the scheduler side in a fixed order.  CAM
falsification and CAM losses use their own streams, so switching CPMs on or
off leaves the CAM stream untouched.
"""

from __future__ import annotations

import hashlib
import json
import math
import sys
from dataclasses import dataclass, field
from typing import TextIO

import numpy as np

from mbdsim import detector
from mbdsim.detector import DetectorContext
from mbdsim.geo import LocalPoint, Pose
from mbdsim.kalman import FilterParams
from mbdsim.messages import MAX_OBJECTS, CamMessage, CpmMessage, KinematicReport
from mbdsim.metrics import WARMUP, WINDOW, Metrics, RunSummary, summarize
from mbdsim.radio import RadioConfig, deliver
from mbdsim.registry import ConsistencyError, TrackRegistry
from mbdsim.scenario.attack import falsify_position
from mbdsim.scenario.model import (
    STREAM_FALSIFY,
    STREAM_JITTER,
    STREAM_RADIO_CAM,
    STREAM_RADIO_CPM,
    Scenario,
)
from mbdsim.sensing import SensorConfig, VehicleFootprint, build_cpm_objects, perceive


class ConfigError(ValueError):
    """Invalid run configuration, detected before the first step."""


class SimulationError(RuntimeError):
    """A detector invariant broke mid-run."""


@dataclass(frozen=True)
class EmissionSchedule:
    cam_period: float = 0.1
    cpm_period: float = 1.0
    jitter: bool = True


@dataclass(frozen=True)
class DetectorParams:
    filter: FilterParams = field(default_factory=FilterParams)
    s_max: float = 100.0
    association_radius: float = 3.0
    cpm_enabled: bool = True


@dataclass
class RunArtifacts:
    metrics: Metrics
    deliveries: int
    cam_deliveries: int
    cpm_deliveries: int
    emissions: dict
    cam_stream_digest: str
    warmup: float
    audit_lines: list[str] | None = None

    @property
    def windows(self):
        return self.metrics.windows

    def summary(self, warmup: float | None = None) -> RunSummary:
        s = summarize(self.metrics.windows, self.warmup if warmup is None else warmup, self.metrics.per_receiver)
        s.extra.update(
            deliveries=self.deliveries,
            cam_deliveries=self.cam_deliveries,
            cpm_deliveries=self.cpm_deliveries,
            cam_decisions=dict(sorted(self.metrics.cam_decisions.items())),
            cpm_decisions=dict(sorted(self.metrics.cpm_decisions.items())),
            cpm_object_actions=dict(sorted(self.metrics.cpm_actions.items())),
            cam_stream_digest=self.cam_stream_digest,
        )
        return s


def _steps_of(period: float, dt: float, name: str) -> int:
    n = round(period / dt)
    if n < 1 or abs(n * dt - period) > 1e-9 * max(1.0, period):
        raise ConfigError(f"{name} ({period}) must be a positive multiple of dt ({dt})")
    return n


class _Resampled:
    """One vehicle's ground truth on the global step grid."""

    __slots__ = ("first", "last", "x", "y", "h", "vx", "vy", "ax", "ay")

    def __init__(self, traj, dt: float, last_step: int):
        first = int(math.ceil(traj.spawn / dt - 1e-9))
        last = min(int(math.floor(traj.despawn / dt + 1e-9)), last_step)
        self.first, self.last = first, last
        if last < first:
            self.x = self.y = self.h = self.vx = self.vy = self.ax = self.ay = []
            return
        steps = np.arange(first, last + 1)
        times = steps * dt
        if len(traj.t) == len(times) and np.array_equal(traj.t, times):
            x, y, h, sp, ax, ay = traj.x, traj.y, traj.heading, traj.speed, traj.ax, traj.ay
        else:
            x = np.interp(times, traj.t, traj.x)
            y = np.interp(times, traj.t, traj.y)
            h = np.mod(np.interp(times, traj.t, np.unwrap(traj.heading)), 2 * math.pi)
            sp = np.interp(times, traj.t, traj.speed)
            ax = np.interp(times, traj.t, traj.ax)
            ay = np.interp(times, traj.t, traj.ay)
        self.x = x.tolist()
        self.y = y.tolist()
        self.h = h.tolist()
        self.vx = (sp * np.cos(h)).tolist()
        self.vy = (sp * np.sin(h)).tolist()
        self.ax = ax.tolist() if isinstance(ax, np.ndarray) else list(ax)
        self.ay = ay.tolist() if isinstance(ay, np.ndarray) else list(ay)

    def report(self, step: int) -> tuple[KinematicReport, float]:
        i = step - self.first
        return (
            KinematicReport(LocalPoint(self.x[i], self.y[i]), (self.vx[i], self.vy[i]), (self.ax[i], self.ay[i])),
            self.h[i],
        )


def run(
    scenario: Scenario,
    radio: RadioConfig | None = None,
    schedule: EmissionSchedule | None = None,
    detector_params: DetectorParams | None = None,
    sensor_cfg: SensorConfig | None = None,
    seed: int = 0,
    *,
    warmup: float = WARMUP,
    window: float = WINDOW,
    audit: TextIO | bool | None = None,
    cam_log: TextIO | None = None,
    progress: bool = False,
) -> RunArtifacts:
    """Simulate ``scenario`` and score every CAM verdict.

    Args:
        audit: ``True`` keeps audit lines in memory, a text stream receives
            them as they are produced, ``None``/``False`` skips them.
        cam_log: Stream that receives one JSON line per CAM emission (what
            was sent and who got it).  Independent of the CPM setting.
        progress: Print a progress line to standard error every 10 % of the run.

    Raises:
        ConfigError: On inconsistent settings, before simulating anything.
        SimulationError: If a receiver's registry invariant breaks.
    """
    radio = radio or RadioConfig()
    schedule = schedule or EmissionSchedule()
    dparams = detector_params or DetectorParams()
    sensor = sensor_cfg or SensorConfig.front()
    if dparams.s_max < sensor.range:
        raise ConfigError(f"s_max ({dparams.s_max}) must be at least the sensor range ({sensor.range})")
    if dparams.association_radius <= 0:
        raise ConfigError("association_radius must be positive")
    dt = scenario.dt
    cam_steps = _steps_of(schedule.cam_period, dt, "cam_period")
    cpm_steps = _steps_of(schedule.cpm_period, dt, "cpm_period")
    last_step = int(math.floor(scenario.duration / dt + 1e-9))
    sweep_steps = max(1, round(1.0 / dt))

    n = scenario.n_vehicles
    truth = [_Resampled(tr, dt, last_step) for tr in scenario.vehicles]
    jitter_rng = np.random.default_rng([seed, STREAM_JITTER])
    if schedule.jitter:
        cam_phase = jitter_rng.integers(0, cam_steps, n).tolist()
        cpm_phase = jitter_rng.integers(0, cpm_steps, n).tolist()
    else:
        cam_phase = [0] * n
        cpm_phase = [0] * n
    cam_rng = np.random.default_rng([seed, STREAM_RADIO_CAM])
    cpm_rng = np.random.default_rng([seed, STREAM_RADIO_CPM])
    attackers = scenario.attacker_flags
    attack_cfg = scenario.attack

    starts: dict[int, list[int]] = {}
    for v, tr in enumerate(truth):
        if tr.last >= tr.first:
            starts.setdefault(tr.first, []).append(v)

    metrics = Metrics(scenario.duration, window)
    keep_lines: list[str] | None = [] if audit is True else None
    sink = audit if (audit not in (None, False, True)) else None
    cam_digest = hashlib.sha256()
    cam_count = [0] * n
    deliveries = cam_deliveries = cpm_deliveries = 0
    emissions = {"cam": 0, "cpm": 0, "falsified": 0}

    active: list[int] = []
    contexts: dict[int, DetectorContext] = {}
    tick = max(1, last_step // 10)

    for step in range(0, last_step + 1):
        t = step * dt
        # (1) advance ground truth
        if step in starts:
            for v in starts[step]:
                contexts[v] = DetectorContext(
                    registry=TrackRegistry(dparams.filter),
                    self_state=truth[v].report(step)[0],
                    sensor=sensor,
                    radio=radio,
                    s_max=dparams.s_max,
                    association_radius=dparams.association_radius,
                )
            active = sorted(active + starts[step])
        gone = [v for v in active if truth[v].last < step]
        if gone:
            for v in gone:
                del contexts[v]
            active = [v for v in active if truth[v].last >= step]
        if not active:
            continue

        states = {}
        for v in active:
            report, heading = truth[v].report(step)
            states[v] = (report, heading)
            ctx = contexts[v]
            ctx.self_state = report
            ctx.self_heading = heading
            ctx.now = t
        row_of = {v: i for i, v in enumerate(active)}
        positions = np.array([states[v][0].position for v in active])
        present = np.ones(len(active), dtype=bool)

        footprints = None
        perception_cache: dict[int, list[int]] = {}

        def perceived(v: int) -> list[int]:
            nonlocal footprints
            hit = perception_cache.get(v)
            if hit is None:
                if footprints is None:
                    footprints = [VehicleFootprint(states[u][0].position, states[u][1]) for u in active]
                i = row_of[v]
                others = footprints[:i] + footprints[i + 1 :]
                idx = perceive(Pose(states[v][0].position, states[v][1]), others, sensor)
                hit = [active[j if j < i else j + 1] for j in idx]
                perception_cache[v] = hit
            return hit

        # (2)+(3) emissions and delivery
        inbox: dict[int, list[tuple]] = {}
        for v in active:
            if (step + cam_phase[v]) % cam_steps:
                continue
            report, heading = states[v]
            sid = scenario.pseudonym_at(v, t)
            cam = CamMessage(sid, t, report)
            falsified = False
            if attackers[v]:
                rng = np.random.default_rng([seed, STREAM_FALSIFY, v, cam_count[v]])
                cam, falsified = falsify_position(cam, attack_cfg, rng)
            cam_count[v] += 1
            emissions["cam"] += 1
            emissions["falsified"] += falsified
            receivers = [active[i] for i in deliver(row_of[v], positions, present, radio, cam_rng)]
            cam_digest.update(
                repr((step, sid, tuple(cam.body.position), tuple(cam.body.velocity), receivers)).encode()
            )
            if cam_log is not None:
                cam_log.write(_cam_line(step, v, cam, falsified, receivers))
            for r in receivers:
                inbox.setdefault(r, []).append((sid, 0, cam, v, falsified))
            cam_deliveries += len(receivers)

        if dparams.cpm_enabled:
            for v in active:
                if (step + cpm_phase[v]) % cpm_steps:
                    continue
                report, heading = states[v]
                sid = scenario.pseudonym_at(v, t)
                ground = {u: states[u][0] for u in perceived(v)}
                objects = build_cpm_objects(report, heading, list(ground), ground, MAX_OBJECTS)
                cpm = CpmMessage(sid, t, report, heading, tuple(objects))
                emissions["cpm"] += 1
                receivers = [active[i] for i in deliver(row_of[v], positions, present, radio, cpm_rng)]
                for r in receivers:
                    inbox.setdefault(r, []).append((sid, 1, cpm, v, False))
                cpm_deliveries += len(receivers)

        # (4) verification, (6) scoring
        for r in sorted(inbox):
            ctx = contexts[r]
            ctx.sense = _sensed_positions(r, perceived, states)
            for sid, kind, msg, sender, falsified in sorted(inbox[r], key=lambda m: (m[0], m[1])):
                try:
                    if kind == 0:
                        verdict = detector.verify_cam(msg, ctx)
                        actions = ()
                        metrics.record_verdict(verdict, falsified, t, r)
                    else:
                        verdict, actions = detector.verify_cpm(msg, ctx)
                        metrics.record_cpm(verdict, actions)
                except ConsistencyError as exc:
                    raise SimulationError(
                        f"step {step} (t={t:.1f} s), receiver {r}, sender {sender}, station {sid}: {exc}"
                    ) from exc
                if keep_lines is not None or sink is not None:
                    line = detector.audit_record(
                        t, r, sid, "cam" if kind == 0 else "cpm", verdict, sender, falsified, actions
                    )
                    if keep_lines is not None:
                        keep_lines.append(line)
                    if sink is not None:
                        sink.write(line + "\n")
        deliveries = cam_deliveries + cpm_deliveries

        # (5) sweep; every lookup checks freshness itself, so once a second is enough
        if step % sweep_steps == 0:
            for v in active:
                contexts[v].registry.sweep(t)

        if progress and step % tick == 0:
            print(f"[mbdsim] t={t:7.1f}s  active={len(active):4d}  deliveries={deliveries}", file=sys.stderr)

    return RunArtifacts(
        metrics=metrics,
        deliveries=cam_deliveries + cpm_deliveries,
        cam_deliveries=cam_deliveries,
        cpm_deliveries=cpm_deliveries,
        emissions=emissions,
        cam_stream_digest=cam_digest.hexdigest(),
        warmup=warmup,
        audit_lines=keep_lines,
    )


def _cam_line(step: int, vehicle: int, cam: CamMessage, falsified: bool, receivers: list[int]) -> str:
    b = cam.body
    return json.dumps(
        {
            "step": step,
            "t": cam.gen_time,
            "vehicle": vehicle,
            "station_id": cam.station_id,
            "position": list(b.position),
            "velocity": list(b.velocity),
            "acceleration": list(b.acceleration),
            "falsified": falsified,
            "receivers": receivers,
        },
        separators=(",", ":"),
    ) + "\n"


def _sensed_positions(r: int, perceived, states):
    def sense():
        return [states[u][0].position for u in perceived(r)]

    return sense
