"""``mbdsim`` command line: ``gen``, ``run`` and ``report``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

from mbdsim import metrics
from mbdsim.geo import GeoOrigin
from mbdsim.kalman import FilterParams
from mbdsim.messages import TraceParseError
from mbdsim.radio import RadioConfig
from mbdsim.scenario import AttackConfig, GridParams, Scenario, ValidationError, assign_roles, load_trace, synth_grid
from mbdsim.scenario.grid import PRESETS
from mbdsim.sensing import SensorConfig
from mbdsim.simkernel import ConfigError, DetectorParams, EmissionSchedule, SimulationError, run

log = logging.getLogger("mbdsim")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

MATRIX = (("CAM/Front", False, "front"), ("CAM/360", False, "omni"), ("CAM+CPM/Front", True, "front"), ("CAM+CPM/360", True, "omni"))


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines a run.  ``None`` fields fall back to the scenario or module defaults."""

    scenario: str | None = None
    trace: str | None = None
    origin: tuple[float, float] | None = None
    synth: dict = field(default_factory=dict)
    seed: int = 0
    cpm: bool = True
    sensor: str = "front"
    attacker_ratio: float | None = None
    falsify_prob: float | None = None
    offset_min: float | None = None
    offset_max: float | None = None
    offset_mode: str | None = None
    pseudonym_period: float | None = None
    rmax: float = 400.0
    dmargin: float = 50.0
    ploss: float = 0.05
    smax: float = 100.0
    theta_pos: float = 5.0
    theta_vel: float = 3.0
    tstale: float = 2.0
    q: float = 0.5
    sigma_pos: float = 1.0
    sigma_vel: float = 0.5
    cam_period: float = 0.1
    cpm_period: float = 1.0
    warmup: float = metrics.WARMUP
    audit: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
        d = dict(d)
        if d.get("origin") is not None:
            d["origin"] = tuple(d["origin"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if d["origin"] is not None:
            d["origin"] = list(d["origin"])
        return d

    def digest(self) -> str:
        """Short content hash used in every artifact file name."""
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    # component objects; each constructor enforces its own invariants

    def radio(self) -> RadioConfig:
        return RadioConfig(r_max=self.rmax, p_loss=self.ploss, d_margin=self.dmargin)

    def detector(self) -> DetectorParams:
        fp = FilterParams(
            q=self.q,
            sigma_pos=self.sigma_pos,
            sigma_vel=self.sigma_vel,
            theta_pos=self.theta_pos,
            theta_vel=self.theta_vel,
            t_stale=self.tstale,
        )
        return DetectorParams(filter=fp, s_max=self.smax, cpm_enabled=self.cpm)

    def schedule(self) -> EmissionSchedule:
        return EmissionSchedule(cam_period=self.cam_period, cpm_period=self.cpm_period)

    def sensor_cfg(self) -> SensorConfig:
        return SensorConfig.of_kind(self.sensor)

    def validate(self) -> None:
        """Check every module invariant up front.

        Raises:
            UsageError: On any violation.
        """
        sources = [s for s in (self.scenario, self.trace) if s] + (["synth"] if self.synth else [])
        if len(sources) != 1:
            raise UsageError("give exactly one scenario source: --scenario, --trace or --synth")
        if self.sensor not in ("front", "omni"):
            raise UsageError(f"--sensor must be front or omni, got {self.sensor!r}")
        if self.warmup < 0:
            raise UsageError("--warmup must be non-negative")
        try:
            radio = self.radio()
            det = self.detector()
            self.schedule()
            sensor = self.sensor_cfg()
            self.attack(AttackConfig())
            if self.pseudonym_period is not None and not self.pseudonym_period > 0:
                raise ValueError("pseudonym period must be positive")
            if self.synth:
                _grid_params(self.synth)
        except (ValueError, TypeError) as exc:
            raise UsageError(str(exc)) from None
        if det.s_max < sensor.range:
            raise UsageError(f"--smax ({det.s_max}) must be at least the sensor range ({sensor.range})")
        if radio.margin_inner < 0:
            raise UsageError("--dmargin must be below --rmax")

    def attack(self, base: AttackConfig) -> AttackConfig:
        changes = {
            k: v
            for k, v in (
                ("attacker_ratio", self.attacker_ratio),
                ("falsify_prob", self.falsify_prob),
                ("offset_min", self.offset_min),
                ("offset_max", self.offset_max),
                ("offset_mode", self.offset_mode),
            )
            if v is not None
        }
        return dataclasses.replace(base, **changes)


def _grid_params(spec: dict) -> GridParams:
    spec = dict(spec)
    preset = spec.pop("preset", None)
    base = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}; choose from {', '.join(sorted(PRESETS))}")
        base = dataclasses.asdict(PRESETS[preset])
    names = {f.name: f.type for f in fields(GridParams)}
    for key, value in spec.items():
        if key not in names:
            raise ValueError(f"unknown grid parameter {key!r}")
        base[key] = value
    return GridParams(**base)


def _coerce(value: str):
    for conv in (int, float):
        try:
            return conv(value)
        except ValueError:
            pass
    if value.lower() in ("true", "false"):
        return value.lower() == "true"
    return value


def parse_synth(items: list[str]) -> dict:
    """``key=value`` pairs; dashes in keys become underscores."""
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--synth expects key=value, got {item!r}")
        out[key.strip().replace("-", "_")] = _coerce(value.strip())
    return out


def build_scenario(cfg: RunConfig) -> Scenario:
    """Load or generate the scenario and apply the attack settings.

    Raises:
        FileNotFoundError, TraceParseError, ValidationError: From the loaders.
    """
    period = cfg.pseudonym_period
    if cfg.scenario:
        path = Path(cfg.scenario)
        if not path.is_file():
            raise FileNotFoundError(f"scenario file not found: {path}")
        sc = Scenario.load(path)
        if period is not None and period != sc.pseudonym_period:
            sc = sc.with_(pseudonym_period=period)
        base = sc.attack
        attack = cfg.attack(base)
        if attack.attacker_ratio != base.attacker_ratio or not any(sc.attacker_flags):
            return assign_roles(sc, attack, cfg.seed) if attack.attacker_ratio > 0 else sc.with_(attack=attack)
        return sc.with_(attack=attack)
    if cfg.trace:
        origin = GeoOrigin(*cfg.origin) if cfg.origin else None
        sc = load_trace(cfg.trace, origin=origin, seed=cfg.seed, pseudonym_period=period or 100.0)
    else:
        sc = synth_grid(_grid_params(cfg.synth), cfg.seed, pseudonym_period=period or 100.0)
    return assign_roles(sc, cfg.attack(AttackConfig()), cfg.seed)


def _artifact(out: Path, stem: str, digest: str, ext: str) -> Path:
    return out / f"{stem}-{digest}.{ext}"


def execute(
    cfg: RunConfig, out: Path, label: str | None = None, progress: bool = False, cam_log: bool = False
) -> metrics.RunSummary:
    """Run one configuration into ``out`` and return its summary.

    ``cam_log`` additionally writes every CAM emission to ``cams-<hash>.jsonl``.
    """
    out.mkdir(parents=True, exist_ok=True)
    digest = cfg.digest()
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    scenario = build_scenario(cfg)
    if not any(w >= cfg.warmup for w in _window_starts(scenario.duration)):
        raise ConfigError(
            f"no 50 s window starts at or after the {cfg.warmup:g} s warmup "
            f"in a {scenario.duration:g} s scenario; lower --warmup"
        )
    audit_path = _artifact(out, "audit", digest, "jsonl")
    cams_path = _artifact(out, "cams", digest, "jsonl")
    with open(audit_path, "w") if cfg.audit else _NullCtx() as audit, (
        open(cams_path, "w") if cam_log else _NullCtx()
    ) as cams:
        art = run(
            scenario,
            cfg.radio(),
            cfg.schedule(),
            cfg.detector(),
            cfg.sensor_cfg(),
            cfg.seed,
            warmup=cfg.warmup,
            audit=audit,
            cam_log=cams,
            progress=progress,
        )
    manifest = {
        "label": label,
        "duration": scenario.duration,
        "vehicles": scenario.n_vehicles,
        "attackers": sum(scenario.attacker_flags),
        "deliveries": art.deliveries,
        "cam_deliveries": art.cam_deliveries,
        "cpm_deliveries": art.cpm_deliveries,
        "emissions": art.emissions,
        "cam_stream_digest": art.cam_stream_digest,
    }
    _artifact(out, "manifest", digest, "json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    _artifact(out, "metrics", digest, "csv").write_text(metrics.metrics_csv(art.windows))
    summary = art.summary()
    _artifact(out, "summary", digest, "json").write_text(metrics.summary_json(summary, label=label) + "\n")
    _artifact(out, "summary", digest, "tsv").write_text(metrics.summary_tsv([(label or digest, summary)]))
    return summary


def _window_starts(duration: float) -> list[float]:
    return [i * metrics.WINDOW for i in range(metrics.n_windows(duration))]


class _NullCtx:
    def __enter__(self):
        return None

    def __exit__(self, *exc):
        return False


def _matrix_cell(args):
    cfg, out, label, cam_log = args
    return label, execute(cfg, out, label, cam_log=cam_log)


def _threads() -> int:
    raw = os.environ.get("MBDSIM_THREADS")
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"MBDSIM_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("MBDSIM_THREADS must be at least 1")
    return n


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    if bool(args.trace) == bool(args.synth):
        raise UsageError("gen needs exactly one of --synth or --trace")
    cfg = RunConfig(
        trace=args.trace,
        origin=_origin(args.origin),
        synth=parse_synth(args.synth or []),
        seed=args.seed,
        attacker_ratio=args.attacker_ratio,
        falsify_prob=args.falsify_prob,
        offset_min=args.offset_min,
        offset_max=args.offset_max,
        pseudonym_period=args.pseudonym_period,
    )
    cfg.validate()
    sc = build_scenario(cfg)
    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    sc.save(out)
    if sc.n_vehicles == 0:
        log.warning("scenario has no vehicles")
    conc = sc.concurrency(1.0)
    mean = float(conc.mean()) if len(conc) else 0.0
    peak = int(conc.max()) if len(conc) else 0
    print(
        f"wrote {out}: {sc.n_vehicles} vehicles ({sum(sc.attacker_flags)} attackers), "
        f"concurrent mean {mean:.1f} max {peak}, duration {sc.duration:g} s"
    )
    return EXIT_OK


def _origin(text: str | None):
    if not text:
        return None
    try:
        lat, lon = (float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--origin expects LAT,LON, got {text!r}") from None
    return (lat, lon)


_RUN_FLAGS = {
    "seed": "seed",
    "sensor": "sensor",
    "attacker_ratio": "attacker_ratio",
    "falsify_prob": "falsify_prob",
    "offset_min": "offset_min",
    "offset_max": "offset_max",
    "offset_mode": "offset_mode",
    "rmax": "rmax",
    "dmargin": "dmargin",
    "smax": "smax",
    "theta_pos": "theta_pos",
    "theta_vel": "theta_vel",
    "tstale": "tstale",
    "pseudonym_period": "pseudonym_period",
    "ploss": "ploss",
    "warmup": "warmup",
    "cam_period": "cam_period",
    "cpm_period": "cpm_period",
    "scenario": "scenario",
    "trace": "trace",
}


def config_from_args(args) -> RunConfig:
    """Config file first, then every flag that was given on the command line."""
    base: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            base = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: {exc}") from None
        if not isinstance(base, dict):
            raise UsageError(f"{path}: expected a JSON object")
    if any(getattr(args, k) for k in ("scenario", "trace", "synth")):
        # a source on the command line replaces the file's source
        for k in ("scenario", "trace", "synth"):
            base.pop(k, None)
    for attr, key in _RUN_FLAGS.items():
        value = getattr(args, attr)
        if value is not None:
            base[key] = value
    if args.cpm is not None:
        base["cpm"] = args.cpm == "on"
    if args.synth:
        base["synth"] = parse_synth(args.synth)
    if args.origin:
        base["origin"] = _origin(args.origin)
    if args.no_audit:
        base["audit"] = False
    cfg = RunConfig.from_dict(base)
    cfg.validate()
    return cfg


def cmd_run(args) -> int:
    cfg = config_from_args(args)
    out = Path(args.out)
    if not args.matrix:
        summary = execute(cfg, out, progress=args.progress, cam_log=args.cam_log)
        print(metrics.summary_table([(f"{'CAM+CPM' if cfg.cpm else 'CAM'}/{cfg.sensor}", summary)]), end="")
        print(f"artifacts in {out} (config {cfg.digest()})")
        return EXIT_OK

    cells = []
    for label, cpm, sensor in MATRIX:
        cell_cfg = dataclasses.replace(cfg, cpm=cpm, sensor=sensor)
        cell_cfg.validate()
        cells.append((cell_cfg, out / label.replace("/", "_").replace("+", "_"), label, args.cam_log))
    workers = min(_threads(), len(cells))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_matrix_cell, cells))
    else:
        results = [_matrix_cell(c) for c in cells]
    table = metrics.summary_table(results)
    digest = cfg.digest()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    _artifact(out, "matrix", digest, "tsv").write_text(metrics.summary_tsv(results))
    _artifact(out, "matrix", digest, "txt").write_text(table)
    print(table, end="")
    digests = {json.loads(next(c[1].glob("manifest-*.json")).read_text())["cam_stream_digest"] for c in cells}
    same = len(digests) == 1
    if args.cam_log:
        logs = [next(c[1].glob("cams-*.jsonl")).read_bytes() for c in cells]
        same = same and all(b == logs[0] for b in logs)
    if not same:
        log.error("CAM streams differ across matrix cells")
        return EXIT_RUNTIME
    return EXIT_OK


def _run_dirs(root: Path) -> list[Path]:
    if list(root.glob("manifest-*.json")):
        return [root]
    return sorted(p for p in root.iterdir() if p.is_dir() and list(p.glob("manifest-*.json")))


def cmd_report(args) -> int:
    root = Path(args.run_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"run directory not found: {root}")
    dirs = _run_dirs(root)
    if not dirs:
        raise FileNotFoundError(f"no run artifacts under {root}")
    rows = []
    for d in dirs:
        cfg = RunConfig.from_dict(json.loads((d / "config.json").read_text()))
        digest = cfg.digest()
        manifest_path = _artifact(d, "manifest", digest, "json")
        audit_path = _artifact(d, "audit", digest, "jsonl")
        if not manifest_path.is_file() or not audit_path.is_file():
            raise FileNotFoundError(f"missing audit log or manifest for config {digest} in {d}")
        manifest = json.loads(manifest_path.read_text())
        with open(audit_path) as fh:
            windows = metrics.replay_audit(fh, manifest["duration"])
        series = metrics.metrics_csv(windows)
        _artifact(d, "metrics", digest, "csv").write_text(series)
        warmup = cfg.warmup if args.warmup is None else args.warmup
        label = manifest.get("label") or f"{'CAM+CPM' if cfg.cpm else 'CAM'}/{cfg.sensor}"
        if len(dirs) == 1:
            sys.stdout.write(series)
        try:
            rows.append((label, metrics.summarize(windows, warmup)))
        except metrics.RunTooShort as exc:
            log.warning("%s: %s", label, exc)
    if rows:
        table = metrics.summary_table(rows)
        if args.tsv:
            Path(args.tsv).write_text(metrics.summary_tsv(rows))
        sys.stderr.write(table) if len(dirs) == 1 else sys.stdout.write(table)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_attack_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--attacker-ratio", type=float)
    p.add_argument("--falsify-prob", type=float)
    p.add_argument("--offset-min", type=float)
    p.add_argument("--offset-max", type=float)
    p.add_argument("--pseudonym-period", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mbdsim", description="CAM/CPM misbehavior detection simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a scenario file")
    g.add_argument("--synth", nargs="+", metavar="KEY=VALUE", help="grid parameters, or preset=dense|sparse|clean")
    g.add_argument("--trace", help="floating-car-data trace (CSV or JSON lines)")
    g.add_argument("--origin", help="LAT,LON projection origin for lat/lon traces")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="scenario.json")
    _add_attack_flags(g)
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("run", help="simulate one configuration or the 2x2 matrix")
    r.add_argument("--config", help="JSON config file; flags override its values")
    r.add_argument("--scenario", help="scenario JSON written by gen")
    r.add_argument("--synth", nargs="+", metavar="KEY=VALUE")
    r.add_argument("--trace")
    r.add_argument("--origin")
    r.add_argument("--seed", type=int)
    r.add_argument("--cpm", choices=("on", "off"))
    r.add_argument("--sensor", choices=("front", "omni"))
    r.add_argument("--offset-mode", choices=("meters", "degrees"))
    r.add_argument("--rmax", type=float)
    r.add_argument("--dmargin", type=float)
    r.add_argument("--smax", type=float)
    r.add_argument("--theta-pos", type=float)
    r.add_argument("--theta-vel", type=float)
    r.add_argument("--tstale", type=float)
    r.add_argument("--ploss", type=float)
    r.add_argument("--warmup", type=float)
    r.add_argument("--cam-period", type=float)
    r.add_argument("--cpm-period", type=float)
    r.add_argument("--matrix", action="store_true", help="run CAM / CAM+CPM x front / omni on the same seed")
    r.add_argument("--no-audit", action="store_true", help="skip the audit log")
    r.add_argument("--cam-log", action="store_true", help="also log every CAM emission (cams-<hash>.jsonl)")
    r.add_argument("--progress", action="store_true")
    r.add_argument("--out", default="runs")
    _add_attack_flags(r)
    r.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="rebuild per-window series and summaries from audit logs")
    p.add_argument("run_dir")
    p.add_argument("--warmup", type=float)
    p.add_argument("--tsv", help="also write the summary table as TSV here")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="mbdsim: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"mbdsim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"mbdsim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TraceParseError, ValidationError, json.JSONDecodeError) as exc:
        print(f"mbdsim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SimulationError, metrics.RunTooShort, OSError) as exc:
        print(f"mbdsim: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
