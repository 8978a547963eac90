"""Command-line front end.

Every run writes into ``<out-dir>/<command>-<hash12>/`` a CSV of raw samples, a JSON
verdict and ``manifest.json`` listing each output with its sha256.  Config files are
YAML mappings whose keys mirror ``ExperimentConfig.to_dict`` (simulate, limit-test,
boolean), ``BurgersConfig.to_dict`` (burgers) or the charlier-check keys below.

Exit codes: 0 pass, 1 verdict failed, 2 bad config or usage, 3 integrity or runtime error.
"""
from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import hashlib
import json
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from .boolean import boolean_limit_experiment
from .burgers import BurgersConfig, burgers_scaling_experiment, run_burgers
from .charlier import invariant_suite
from .errors import ConfigurationError, GrainFieldError, IntegrityError
from .experiments import ExperimentConfig, regime_report, run_replications, write_json
from .limits import LimitLaw, empirical_cf

OUT_DIR_ENV = "GRAINLRD_OUT_DIR"
MANIFEST = "manifest.json"
SCHEMA = 1

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

_UNIT = {"kind": "rectangle", "lo": [0.0], "hi": [1.0]}
_SPEC = {"d": 1, "shape": "cube", "alpha": 1.5, "r0": 1.0}


def _experiment(name, gamma, replications, subordinator=None, h=0.25, seed=12345):
    return {
        "name": name, "spec": dict(_SPEC), "phi": dict(_UNIT), "gamma": gamma, "lambdas": [256.0],
        "replications": replications, "subordinator": subordinator or {"kind": "identity"},
        "apply_to": "auto", "h": h, "master_seed": seed,
    }


def _burgers(name, gamma, lambdas, replications):
    return {
        "name": name, "spec": dict(_SPEC), "kappa": 1.0,
        "points": [[0.5, [0.0]], [0.5, [0.25]], [1.0, [0.0]], [1.0, [0.25]]],
        "lambdas": lambdas, "gamma": gamma, "replications": replications, "trunc": 8.0, "h": 0.25,
        "master_seed": 777,
    }


PRESETS = {
    "thm22-gaussian": ("limit-test", _experiment("thm22-gaussian", 1.0, 1000)),
    "thm22-stable": ("limit-test", _experiment("thm22-stable", 0.2, 2000)),
    "thm22-boundary": ("limit-test", _experiment("thm22-boundary", 0.5, 2000)),
    "thm41-exponential": ("limit-test", _experiment("thm41-exponential", 1.0, 1000, {"kind": "exp", "a": 0.5})),
    "cor41-boolean": ("boolean", _experiment("cor41-boolean", 0.0, 2000, {"kind": "min1"}, h=0.0625, seed=4242)),
    "cor51-burgers": ("burgers", _burgers("cor51-burgers", 1.0, [16.0, 32.0, 64.0, 128.0], 300)),
    "cor52-burgers-gamma0": ("burgers",
                             _burgers("cor52-burgers-gamma0", 0.0, [256.0, 512.0, 1024.0, 2048.0, 4096.0], 400)),
}

CHARLIER_DEFAULTS = {
    "mus": [0.5, 3.0, 10.0], "K": 8, "mehler": [3.0, 3.0, 1.5], "x_max": 30, "a": 0.5, "mu_closed": 3.0,
    "M_limit": 1.0e6,
}

_EXPERIMENT_KEYS = {f.name for f in dataclasses.fields(ExperimentConfig)}
_BURGERS_KEYS = {f.name for f in dataclasses.fields(BurgersConfig)}


class ConfigError(ConfigurationError):
    pass


# config ---------------------------------------------------------------------------
def load_config(path) -> dict:
    """Read a YAML mapping; parse errors name the line, unknown shapes raise ``ConfigError``."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"{path}: malformed YAML{where}: {getattr(exc, 'problem', exc)}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def dump_config(d: dict) -> str:
    return yaml.safe_dump(d, sort_keys=True, default_flow_style=None)


def _check_keys(d: dict, allowed: set, what: str) -> None:
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"unknown {what} key {unknown[0]!r}")


def _wrap(fn, d: dict):
    try:
        return fn(d)
    except ConfigurationError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from None


def experiment_from(d: dict) -> ExperimentConfig:
    _check_keys(d, _EXPERIMENT_KEYS, "experiment")
    base = copy.deepcopy(PRESETS["thm22-gaussian"][1])
    base.update(d)
    return _wrap(ExperimentConfig.from_dict, base)


def burgers_from(d: dict) -> BurgersConfig:
    _check_keys(d, _BURGERS_KEYS, "burgers")
    return _wrap(BurgersConfig.from_dict, d)


def charlier_from(d: dict) -> dict:
    _check_keys(d, set(CHARLIER_DEFAULTS), "charlier-check")
    out = dict(CHARLIER_DEFAULTS)
    out.update(d)
    return out


def _digest(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


# manifest -------------------------------------------------------------------------
@dataclasses.dataclass
class RunManifest:
    command: str
    config_hash: str
    master_seed: int | None
    config: dict
    versions: dict = dataclasses.field(default_factory=lambda: {
        "grainlrd": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
        "python": platform.python_version(),
    })
    files: list = dataclasses.field(default_factory=list)
    timings: dict = dataclasses.field(default_factory=dict)
    passed: bool | None = None
    defaults_applied: list = dataclasses.field(default_factory=list)

    def add_file(self, run_dir: Path, name: str) -> None:
        self.files.append({"path": name, "sha256": sha256_file(run_dir / name)})

    def write(self, run_dir: Path) -> None:
        d = dataclasses.asdict(self)
        d["schema"] = SCHEMA
        write_json(d, run_dir / MANIFEST)


class _Timer:
    def __init__(self, sink: dict, name: str):
        self.sink, self.name = sink, name

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        self.sink[self.name] = time.perf_counter() - self.t0


# commands -------------------------------------------------------------------------
def _resolve(args, command: str) -> tuple[dict, list]:
    """Raw config dict from ``--preset`` and/or a config file, then CLI overrides."""
    applied = []
    if args.preset:
        if args.preset not in PRESETS:
            raise ConfigError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
        pcmd, d = PRESETS[args.preset]
        if pcmd != command:
            raise ConfigError(f"preset {args.preset!r} belongs to the {pcmd!r} command")
        d = copy.deepcopy(d)
    else:
        d = {}
    if args.config:
        d.update(load_config(args.config))
    if not d:
        applied.append("empty config: defaults applied")
    if getattr(args, "seed", None) is not None:
        d["master_seed"] = args.seed
        applied.append("master_seed from --seed")
    if getattr(args, "replications", None) is not None:
        d["replications"] = args.replications
        applied.append("replications from --replications")
    return d, applied


def _run_dir(args, command: str, config_hash: str) -> Path:
    root = Path(args.out_dir or os.environ.get(OUT_DIR_ENV, "runs"))
    run_dir = root / f"{command}-{config_hash[:12]}"
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _finish(manifest: RunManifest, run_dir: Path, names, verdict: dict | None, t0: float) -> int:
    if verdict is not None:
        write_json(verdict, run_dir / "verdict.json")
        names = list(names) + ["verdict.json"]
        manifest.passed = bool(verdict.get("passed"))
    for n in names:
        manifest.add_file(run_dir, n)
    manifest.timings["total"] = time.perf_counter() - t0
    manifest.write(run_dir)
    print(run_dir)
    if verdict is not None:
        print("PASS" if manifest.passed else "FAIL")
        return EXIT_PASS if manifest.passed else EXIT_FAIL
    return EXIT_PASS


def cmd_charlier_check(args) -> int:
    t0 = time.perf_counter()
    raw, applied = _resolve(args, "charlier-check")
    cfg = charlier_from(raw)
    h = _digest(dict(cfg, inject_fault=args.inject_fault) if args.inject_fault else cfg)
    run_dir = _run_dir(args, "charlier-check", h)
    m = RunManifest("charlier-check", h, None, cfg, defaults_applied=applied)
    with _Timer(m.timings, "suite"):
        results = invariant_suite(cfg["mus"], cfg["K"], tuple(cfg["mehler"]), cfg["x_max"], cfg["a"],
                                  cfg["mu_closed"], cfg["M_limit"], fault=args.inject_fault)
    verdict = {"schema": SCHEMA, "checks": [r.to_dict() for r in results], "fault": args.inject_fault,
               "passed": all(r.passed for r in results)}
    for r in results:
        print(f"{r.name:28s} {r.deviation:.3e} < {r.tolerance:.0e}  {'ok' if r.passed else 'FAIL'}")
    return _finish(m, run_dir, [], verdict, t0)


def _experiment_run(args, command: str):
    t0 = time.perf_counter()
    raw, applied = _resolve(args, command)
    cfg = experiment_from(raw)
    run_dir = _run_dir(args, command, cfg.digest())
    m = RunManifest(command, cfg.digest(), cfg.master_seed, cfg.to_dict(), defaults_applied=applied)
    with _Timer(m.timings, "simulate"):
        samples = run_replications(cfg, args.threads, args.cache_fields)
    samples.write_csv(run_dir / "samples.csv")
    return t0, cfg, run_dir, m, samples


def cmd_simulate(args) -> int:
    t0, _, run_dir, m, _ = _experiment_run(args, "simulate")
    return _finish(m, run_dir, ["samples.csv"], None, t0)


def cmd_limit_test(args) -> int:
    t0, cfg, run_dir, m, samples = _experiment_run(args, "limit-test")
    with _Timer(m.timings, "report"):
        verdict = regime_report(cfg, samples)
    return _finish(m, run_dir, ["samples.csv"], verdict, t0)


def cmd_boolean(args) -> int:
    t0, cfg, run_dir, m, samples = _experiment_run(args, "boolean")
    with _Timer(m.timings, "report"):
        verdict = boolean_limit_experiment(cfg, samples)
    return _finish(m, run_dir, ["samples.csv"], verdict, t0)


def cmd_burgers(args) -> int:
    t0 = time.perf_counter()
    raw, applied = _resolve(args, "burgers")
    cfg = burgers_from(raw)
    h = _digest(cfg.to_dict())
    run_dir = _run_dir(args, "burgers", h)
    m = RunManifest("burgers", h, cfg.master_seed, cfg.to_dict(), defaults_applied=applied)
    with _Timer(m.timings, "simulate"):
        samples = run_burgers(cfg, args.threads, args.cache_fields)
    samples.write_csv(run_dir / "velocities.csv")
    with _Timer(m.timings, "report"):
        verdict = burgers_scaling_experiment(cfg, samples)
    return _finish(m, run_dir, ["velocities.csv"], verdict, t0)


# report ---------------------------------------------------------------------------
def _read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([format(v, ".17g") if isinstance(v, float) else v for v in r])


def _plot_data(entry: dict, run_dir: Path, plot_dir: Path) -> list[str]:
    """Histogram, empirical-CF grid and log-log series for one run."""
    tag = entry["config_hash"][:12]
    written = []
    samples_csv = run_dir / "samples.csv"
    if samples_csv.exists():
        rows = _read_csv(samples_csv)
        lam = max(float(r["lambda"]) for r in rows)
        x = np.array([float(r["statistic"]) for r in rows if float(r["lambda"]) == lam])
        counts, edges = np.histogram(x, bins=min(60, max(10, x.size // 20)))
        name = f"{tag}-histogram.csv"
        _write_rows(plot_dir / name, ["left", "right", "count"],
                    [(float(a), float(b), int(c)) for a, b, c in zip(edges[:-1], edges[1:], counts)])
        written.append(name)
        scale = float(np.median(np.abs(x - np.median(x)))) or 1.0
        theta = np.linspace(0.0, 4.0 / scale, 81)
        ecf = empirical_cf(x, theta)
        name = f"{tag}-ecf.csv"
        _write_rows(plot_dir / name, ["theta", "re", "im"],
                    [(float(t), float(z.real), float(z.imag)) for t, z in zip(theta, ecf)])
        written.append(name)
        lams = sorted({float(r["lambda"]) for r in rows})
        if len(lams) > 1:
            name = f"{tag}-variance.csv"
            _write_rows(plot_dir / name, ["lambda", "variance_raw"],
                        [(l, float(np.var([float(r["raw"]) for r in rows if float(r["lambda"]) == l], ddof=1)))
                         for l in lams])
            written.append(name)
    vel_csv = run_dir / "velocities.csv"
    if vel_csv.exists():
        rows = _read_csv(vel_csv)
        keys = sorted({(float(r["lambda"]), float(r["t"]), r["x"]) for r in rows})
        series = []
        for lam, t, xs in keys:
            v = np.array([float(r["v"]) for r in rows
                          if float(r["lambda"]) == lam and float(r["t"]) == t and r["x"] == xs])
            v = v[np.isfinite(v)]
            series.append((lam, t, xs, float(np.median(np.abs(v))) if v.size else float("nan")))
        name = f"{tag}-loglog.csv"
        _write_rows(plot_dir / name, ["lambda", "t", "x", "median_abs_v"], series)
        written.append(name)
    return written


def verify_run(run_dir: Path) -> dict:
    """Load a manifest and check every recorded file against its sha256."""
    man_path = run_dir / MANIFEST
    if not man_path.exists():
        raise IntegrityError(f"{run_dir}: missing {MANIFEST}")
    man = json.loads(man_path.read_text(encoding="utf-8"))
    for f in man["files"]:
        p = run_dir / f["path"]
        if not p.exists():
            raise IntegrityError(f"{p}: listed in manifest but missing")
        if sha256_file(p) != f["sha256"]:
            raise IntegrityError(f"{p}: content hash does not match the manifest")
    return man


def build_report(root: Path) -> dict:
    root = Path(root)
    if not root.is_dir():
        raise ConfigError(f"{root} is not a directory")
    run_dirs = sorted({p.parent for p in root.rglob("*") if p.name in (MANIFEST, "verdict.json")
                       or p.suffix == ".csv" and p.parent.name != "plot-data"})
    entries = []
    for rd in run_dirs:
        man = verify_run(rd)
        verdict_path = rd / "verdict.json"
        verdict = json.loads(verdict_path.read_text(encoding="utf-8")) if verdict_path.exists() else None
        entries.append({
            "run_dir": str(rd.relative_to(root)), "command": man["command"], "config_hash": man["config_hash"],
            "master_seed": man["master_seed"], "passed": man.get("passed"), "timings": man.get("timings", {}),
            "verdict": verdict,
        })
    entries.sort(key=lambda e: (e["config_hash"], e["run_dir"]))
    summary = {"schema": SCHEMA, "runs": entries, "n_runs": len(entries),
               "all_passed": all(e["passed"] is not False for e in entries)}
    if entries:
        plot_dir = root / "plot-data"
        plot_dir.mkdir(exist_ok=True)
        for e in entries:
            e["plot_data"] = _plot_data(e, root / e["run_dir"], plot_dir)
    return summary


def cmd_report(args) -> int:
    summary = build_report(Path(args.run_dir))
    write_json(summary, Path(args.run_dir) / "summary.json")
    print(f"{summary['n_runs']} runs, all passed: {summary['all_passed']}")
    return EXIT_PASS


def cmd_preset(args) -> int:
    if args.name is None:
        for name, (command, _) in sorted(PRESETS.items()):
            print(f"{name:24s} {command}")
        return EXIT_PASS
    if args.name not in PRESETS:
        raise ConfigError(f"unknown preset {args.name!r}")
    sys.stdout.write(dump_config(PRESETS[args.name][1]))
    return EXIT_PASS


# entry point -----------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="grainlrd", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seeded=True):
        sp.add_argument("config", nargs="?", help="YAML config file")
        sp.add_argument("--preset", help="start from a named preset")
        sp.add_argument("--out-dir", help=f"output root (default ${OUT_DIR_ENV} or ./runs)")
        if seeded:
            sp.add_argument("--seed", type=int, help="override master_seed")
            sp.add_argument("--replications", type=int, help="override replications")
            sp.add_argument("--threads", type=int, default=1, help="worker processes")
            sp.add_argument("--cache-fields", metavar="DIR", help="cache simulated fields in DIR")

    sp = sub.add_parser("charlier-check", help="Charlier exactness suite")
    common(sp, seeded=False)
    sp.add_argument("--inject-fault", type=float, default=0.0, metavar="REL",
                    help="perturb a coefficient by this relative amount (negative control)")
    sp.set_defaults(func=cmd_charlier_check)
    for name, fn, text in [("simulate", cmd_simulate, "replicated functionals to CSV"),
                           ("limit-test", cmd_limit_test, "simulate and test against the limit law"),
                           ("boolean", cmd_boolean, "Boolean-model volume experiment"),
                           ("burgers", cmd_burgers, "Burgers velocity scaling experiment")]:
        sp = sub.add_parser(name, help=text)
        common(sp)
        sp.set_defaults(func=fn)
    sp = sub.add_parser("report", help="aggregate a directory of runs")
    sp.add_argument("run_dir")
    sp.set_defaults(func=cmd_report)
    sp = sub.add_parser("preset", help="list presets or print one as YAML")
    sp.add_argument("name", nargs="?")
    sp.set_defaults(func=cmd_preset)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GrainFieldError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
