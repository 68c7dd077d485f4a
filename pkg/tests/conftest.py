import math

import pytest

from mbdsim.geo import LocalPoint
from mbdsim.messages import KinematicReport


def report(x=0.0, y=0.0, vx=0.0, vy=0.0, ax=0.0, ay=0.0) -> KinematicReport:
    return KinematicReport(LocalPoint(float(x), float(y)), (float(vx), float(vy)), (float(ax), float(ay)))


@pytest.fixture
def rep():
    return report


def approx_pt(p, q, tol=1e-9):
    return math.isclose(p[0], q[0], abs_tol=tol) and math.isclose(p[1], q[1], abs_tol=tol)


def straight_road(xs, speed=10.0, duration=10.0, dt=0.1, y=0.0, attackers=None, phases=None, seed=0, **scenario_kw):
    """Vehicles driving east in one lane, starting at ``xs``, all present from t = 0."""
    import numpy as np

    from mbdsim.scenario import Scenario, Trajectory

    n_steps = int(round(duration / dt)) + 1
    t = np.arange(n_steps) * dt
    zeros = np.zeros(n_steps)
    vehicles = tuple(
        Trajectory(t, x0 + speed * t, zeros + y, zeros.copy(), zeros + speed, zeros.copy(), zeros.copy()) for x0 in xs
    )
    n = len(xs)
    return Scenario(
        duration=duration,
        dt=dt,
        vehicles=vehicles,
        attacker_flags=tuple(attackers or (False,) * n),
        pseudonym_phase=tuple(phases or (0.0,) * n),
        seed=seed,
        **scenario_kw,
    )


def tally_audit(lines, duration, width=50.0):
    """Count CAM verdicts per window straight from audit JSON, sharing no code with the package."""
    import json

    n = max(1, math.ceil(duration / width - 1e-9))
    counts = [[0, 0, 0, 0] for _ in range(n)]
    for line in lines:
        rec = json.loads(line)
        if rec["msg_type"] != "cam":
            continue
        i = min(int(rec["rx_time"] // width), n - 1)
        rej = rec["decision"] == "Reject"
        if rec["falsified"]:
            counts[i][0] += 1
            counts[i][1] += rej
        else:
            counts[i][2] += 1
            counts[i][3] += rej
    return counts


def window_counts(windows):
    return [[w.attack_received, w.attack_rejected, w.valid_received, w.valid_rejected] for w in windows]


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def record_criterion(tag: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"{tag:<4} {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s[1:].split()[0].rstrip("ab"))):
            terminalreporter.write_line(line)
