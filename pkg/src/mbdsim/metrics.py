"""Windowed reject-attack / reject-valid accounting over CAM verdicts.

Counts are pooled over all receivers per window.  CPM sender verdicts are
tallied separately and never enter the rates.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable

WINDOW = 50.0
WARMUP = 500.0


class RunTooShort(ValueError):
    pass


@dataclass
class RateWindow:
    window_start: float
    width: float = WINDOW
    attack_received: int = 0
    attack_rejected: int = 0
    valid_received: int = 0
    valid_rejected: int = 0


def rates(window: RateWindow) -> tuple[float | None, float | None]:
    """``(tp, fp)`` in percent; ``None`` where the class saw no messages."""
    tp = 100.0 * window.attack_rejected / window.attack_received if window.attack_received else None
    fp = 100.0 * window.valid_rejected / window.valid_received if window.valid_received else None
    return tp, fp


def n_windows(duration: float, width: float = WINDOW) -> int:
    return max(1, math.ceil(duration / width - 1e-9))


def window_index(rx_time: float, n: int, width: float = WINDOW) -> int:
    # the sample at exactly t = duration belongs to the last window
    return min(int(rx_time // width), n - 1)


class Metrics:
    """Accumulator owned by the simulation loop."""

    def __init__(self, duration: float, width: float = WINDOW):
        self.duration = duration
        self.width = width
        n = n_windows(duration, width)
        self.windows = [RateWindow(i * width, width) for i in range(n)]
        # receiver -> [attack_received, attack_rejected, valid_received, valid_rejected] per window
        self.per_receiver: dict[int, list[list[int]]] = {}
        self.cpm_decisions: Counter = Counter()
        self.cpm_actions: Counter = Counter()
        self.cam_decisions: Counter = Counter()

    def record(self, rejected: bool, falsified: bool, rx_time: float, receiver: int | None = None) -> None:
        i = window_index(rx_time, len(self.windows), self.width)
        w = self.windows[i]
        if falsified:
            w.attack_received += 1
            w.attack_rejected += rejected
        else:
            w.valid_received += 1
            w.valid_rejected += rejected
        if receiver is not None:
            rows = self.per_receiver.get(receiver)
            if rows is None:
                rows = self.per_receiver[receiver] = [[0, 0, 0, 0] for _ in self.windows]
            row = rows[i]
            if falsified:
                row[0] += 1
                row[1] += rejected
            else:
                row[2] += 1
                row[3] += rejected

    def record_verdict(self, verdict, falsified: bool, rx_time: float, receiver: int | None = None) -> None:
        self.cam_decisions[verdict.decision.value] += 1
        self.record(not verdict.decision.accepted, falsified, rx_time, receiver)

    def record_cpm(self, verdict, actions=()) -> None:
        self.cpm_decisions[verdict.decision.value] += 1
        for a in actions:
            self.cpm_actions[a.value] += 1

    def received_total(self) -> int:
        return sum(w.attack_received + w.valid_received for w in self.windows)


def _mean(values: list[float]) -> float | None:
    return sum(values) / len(values) if values else None


@dataclass
class RunSummary:
    warmup: float
    window_starts: list[float]
    tp_series: list[float | None]
    fp_series: list[float | None]
    tp_average: float | None
    tp_worst: float | None
    fp_average: float | None
    fp_best: float | None
    pooled_tp: float | None
    pooled_fp: float | None
    receiver_avg_tp: float | None = None
    receiver_avg_fp: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(
    windows: list[RateWindow],
    warmup: float = WARMUP,
    per_receiver: dict[int, list[list[int]]] | None = None,
) -> RunSummary:
    """Steady-state aggregates over windows starting at or after ``warmup``.

    Raises:
        RunTooShort: If no window starts at or after ``warmup``.
    """
    steady = [w for w in windows if w.window_start >= warmup]
    if not steady:
        raise RunTooShort(
            f"no 50 s window starts at or after the {warmup:g} s warmup; run longer or lower --warmup"
        )
    series = [rates(w) for w in windows]
    steady_rates = [rates(w) for w in steady]
    tps = [tp for tp, _ in steady_rates if tp is not None]
    fps = [fp for _, fp in steady_rates if fp is not None]
    att_rx = sum(w.attack_received for w in steady)
    val_rx = sum(w.valid_received for w in steady)
    pooled_tp = 100.0 * sum(w.attack_rejected for w in steady) / att_rx if att_rx else None
    pooled_fp = 100.0 * sum(w.valid_rejected for w in steady) / val_rx if val_rx else None

    recv_tp = recv_fp = None
    if per_receiver:
        first = next(i for i, w in enumerate(windows) if w.window_start >= warmup)
        r_tps, r_fps = [], []
        for rid in sorted(per_receiver):
            rows = per_receiver[rid][first:]
            a_rx = sum(r[0] for r in rows)
            v_rx = sum(r[2] for r in rows)
            if a_rx:
                r_tps.append(100.0 * sum(r[1] for r in rows) / a_rx)
            if v_rx:
                r_fps.append(100.0 * sum(r[3] for r in rows) / v_rx)
        recv_tp, recv_fp = _mean(r_tps), _mean(r_fps)

    return RunSummary(
        warmup=warmup,
        window_starts=[w.window_start for w in windows],
        tp_series=[tp for tp, _ in series],
        fp_series=[fp for _, fp in series],
        tp_average=_mean(tps),
        tp_worst=min(tps) if tps else None,
        fp_average=_mean(fps),
        fp_best=min(fps) if fps else None,
        pooled_tp=pooled_tp,
        pooled_fp=pooled_fp,
        receiver_avg_tp=recv_tp,
        receiver_avg_fp=recv_fp,
    )


def _fmt(v: float | None) -> str:
    return "" if v is None else f"{v:.6f}"


def metrics_csv(windows: Iterable[RateWindow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["window_start", "tp_pct", "fp_pct", "attack_received", "attack_rejected", "valid_received", "valid_rejected"]
    )
    for w in windows:
        tp, fp = rates(w)
        writer.writerow(
            [
                f"{w.window_start:g}",
                _fmt(tp),
                _fmt(fp),
                w.attack_received,
                w.attack_rejected,
                w.valid_received,
                w.valid_rejected,
            ]
        )
    return buf.getvalue()


SUMMARY_COLUMNS = ("config", "reject_attack_average", "reject_attack_worst", "reject_valid_average", "reject_valid_best")


def summary_tsv(rows: list[tuple[str, RunSummary]]) -> str:
    lines = ["\t".join(SUMMARY_COLUMNS)]
    for label, s in rows:
        lines.append(
            "\t".join([label, _fmt1(s.tp_average), _fmt1(s.tp_worst), _fmt1(s.fp_average), _fmt1(s.fp_best)])
        )
    return "\n".join(lines) + "\n"


def _fmt1(v: float | None) -> str:
    return "-" if v is None else f"{v:.1f}"


def summary_table(rows: list[tuple[str, RunSummary]]) -> str:
    """Human-readable table laid out like the reject-attack / reject-valid tables."""
    head1 = f"{'':<22}| {'Reject Attack [%]':^17} | {'Reject Valid [%]':^17}"
    head2 = f"{'':<22}| {'Average':>8} {'Worst':>8} | {'Average':>8} {'Best':>8}"
    out = [head1, head2, "-" * len(head2)]
    for label, s in rows:
        out.append(
            f"{label:<22}| {_fmt1(s.tp_average):>8} {_fmt1(s.tp_worst):>8} | {_fmt1(s.fp_average):>8} {_fmt1(s.fp_best):>8}"
        )
    return "\n".join(out) + "\n"


def summary_json(summary: RunSummary, **extra) -> str:
    d = summary.to_dict()
    d["extra"] = {**d.get("extra", {}), **extra}
    return json.dumps(d, indent=2, sort_keys=True)


def replay_audit(lines: Iterable[str], duration: float, width: float = WINDOW) -> list[RateWindow]:
    """Rebuild the rate windows from audit-log lines (CAM lines only)."""
    n = n_windows(duration, width)
    windows = [RateWindow(i * width, width) for i in range(n)]
    for line in lines:
        rec = json.loads(line)
        if rec["msg_type"] != "cam":
            continue
        w = windows[window_index(rec["rx_time"], n, width)]
        rejected = rec["decision"] == "Reject"
        if rec["falsified"]:
            w.attack_received += 1
            w.attack_rejected += rejected
        else:
            w.valid_received += 1
            w.valid_rejected += rejected
    return windows
