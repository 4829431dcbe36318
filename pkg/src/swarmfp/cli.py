"""Command-line front end.

Exit codes: 0 ok, 1 validation error, 2 runtime error, 3 safety violation
under ``--strict``.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import ConfigError, build_sim_config, config_hash, load_yaml, override, resolve, schema_rows, to_tree
from .controllers import CONTROLLERS
from .sim import (
    SCHEMA_VERSION,
    BatchResult,
    UnsafeInitialStateError,
    run_batch,
    run_scaling_bench,
    write_compare_csv,
    write_metrics_csv,
    write_scaling_csv,
    write_timings_csv,
)
from .verify import SUITES

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_UNSAFE = 0, 1, 2, 3

log = logging.getLogger("swarmfp")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, values: dict, started: str, outputs: list[Path], command: str) -> Path:
    manifest = {
        "tool": "swarmfp",
        "version": __version__,
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "config_hash": config_hash(values),
        "seed": values["sim.seed"],
        "started": started,
        "finished": _now(),
        "config": to_tree(values),
        "outputs": {str(p.relative_to(out)): _sha256(p) for p in outputs},
    }
    path = out / "manifest.json"
    _atomic_write(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _load(args) -> dict:
    values = load_yaml(args.config) if args.config else resolve({})
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["sim.seed"] = args.seed
    if getattr(args, "runs", None) is not None:
        changes["sim.n_runs"] = args.runs
    if getattr(args, "controller", None):
        changes["controller"] = args.controller
    return override(values, changes) if changes else values


def _threads(args) -> int:
    return args.threads if args.threads else (os.cpu_count() or 1)


def _write_batch(out: Path, batch: BatchResult) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    written = []
    metrics, timings = out / "metrics.csv", out / "timings.csv"
    write_metrics_csv(batch.mean, metrics)
    write_timings_csv(batch.mean, timings)
    written += [metrics, timings]
    if len(batch.traces) > 1:
        (out / "runs").mkdir(exist_ok=True)
        for i, tr in enumerate(batch.traces):
            p = out / "runs" / f"run_{i:03d}.csv"
            write_metrics_csv(tr, p)
            written.append(p)
    summary = out / "summary.json"
    summary.write_text(json.dumps(batch.summary(), indent=2) + "\n")
    written.append(summary)
    return written


def _render(out: Path) -> list[Path]:
    from .plotting import render_directory

    return render_directory(out)


def cmd_run(args) -> int:
    started = _now()
    values = _load(args)
    cfg = build_sim_config(values)
    out = Path(args.out)
    batch = run_batch(cfg, threads=_threads(args))
    written = _write_batch(out, batch)
    if args.plots:
        written += _render(out)
    write_manifest(out, values, started, written, "run")
    v = batch.violations
    print(f"{cfg.controller}: {len(batch.traces)} run(s), {v} violation(s), min h {batch.summary()['min_h']:.4e}")
    return EXIT_UNSAFE if (args.strict and v) else EXIT_OK


def _controller_list(text: str) -> list[str]:
    names = [s.strip() for s in text.split(",") if s.strip()]
    bad = [n for n in names if n not in CONTROLLERS]
    if bad or not names:
        raise ConfigError("--controllers", f"unknown controller(s) {bad}; valid: {', '.join(CONTROLLERS)}")
    return names


def cmd_compare(args) -> int:
    started = _now()
    names = _controller_list(args.controllers)
    values = _load(args)
    base = build_sim_config(values)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    means, written, summary = {}, [], {}
    unsafe = False
    for name in names:
        batch = run_batch(replace(base, controller=name), threads=_threads(args))
        means[name] = batch.mean
        written += _write_batch(out / name, batch)
        summary[name] = {k: v for k, v in batch.summary().items() if k != "runs"}
        unsafe |= batch.violations > 0
        print(f"{name}: {batch.violations} violation(s) over {len(batch.traces)} run(s)")
    comp = out / "compare.csv"
    write_compare_csv(means, comp)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    written += [comp, out / "summary.json"]
    if args.plots:
        written += _render(out)
    write_manifest(out, values, started, written, "compare")
    return EXIT_UNSAFE if (args.strict and unsafe) else EXIT_OK


def cmd_verify(args) -> int:
    if args.suite not in SUITES:
        raise ConfigError("suite", f"unknown suite {args.suite!r}; valid: {', '.join(SUITES)}")
    checks = SUITES[args.suite]()
    failed = 0
    for c in checks:
        print(c.line())
        failed += not (c.passed or c.info)
    print(f"{args.suite}: {len(checks) - failed}/{len(checks)} passed")
    return EXIT_OK if failed == 0 else EXIT_VALIDATION


def cmd_bench(args) -> int:
    started = _now()
    values = _load(args)
    if args.spacing is not None:
        values = override(values, {"grid.spacing": args.spacing})
    base = build_sim_config(values)
    counts = tuple(int(s) for s in args.counts.split(","))
    rows = run_scaling_bench(base, counts, controllers=_controller_list(args.controllers), steps=args.steps,
                             rounds=args.rounds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "scaling.csv"
    write_scaling_csv(rows, path)
    written = [path]
    for r in rows:
        print(f"N={r.n_robots:3d} {r.controller:8s} {r.mean_step_ms:8.3f} ms +- {r.std_step_ms:.3f}")
    if args.plots:
        written += _render(out)
    write_manifest(out, values, started, written, "bench")
    return EXIT_OK


def cmd_report(args) -> int:
    out = Path(args.dir)
    if not out.is_dir():
        raise ConfigError("dir", f"{out} is not a directory")
    figs = _render(out)
    for sub in sorted(p for p in out.iterdir() if p.is_dir() and (p / "metrics.csv").exists()):
        figs += _render(sub)
    if not figs:
        raise ConfigError("dir", f"no metrics.csv, compare.csv or scaling.csv under {out}")
    for f in figs:
        print(f)
    return EXIT_OK


def cmd_schema(args) -> int:
    for key, default, prov, rule in schema_rows():
        print(f"{key:24s} {default:22s} {prov:12s} {rule}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="swarmfp", description="Safe density control of robot swarms.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_default):
        p.add_argument("--config", help="YAML config file (defaults used when omitted)")
        p.add_argument("--out", default=out_default, help="output directory")
        p.add_argument("--seed", type=int, help="override sim.seed")
        p.add_argument("--runs", type=int, help="override sim.n_runs")
        p.add_argument("--threads", type=int, default=0, help="batch worker threads (default: all cores)")
        p.add_argument("--plots", action="store_true", help="also render PNG figures next to the CSVs")

    p = sub.add_parser("run", help="simulate one controller")
    common(p, "out")
    p.add_argument("--controller", help="override the configured controller")
    p.add_argument("--strict", action="store_true", help="exit 3 if any run violates h >= 0")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="run several controllers on identical seeds")
    common(p, "out")
    p.add_argument("--controllers", default="RvObc,RvObcV", help="comma-separated controller names")
    p.add_argument("--strict", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("verify", help="run an invariant suite")
    p.add_argument("suite", help=", ".join(SUITES))
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="step time against swarm size")
    p.add_argument("--config")
    p.add_argument("--out", default="bench")
    p.add_argument("--counts", default="6,10,15,20")
    p.add_argument("--controllers", default="RvObc,RvObcV")
    p.add_argument("--steps", type=int, default=20, help="timed steps per swarm size and round")
    p.add_argument("--rounds", type=int, default=5, help="interleaved passes over all swarm sizes")
    p.add_argument("--spacing", type=float, default=0.05, help="grid spacing (0.05 gives 81x81)")
    p.add_argument("--plots", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="render figures from the CSVs in an output directory")
    p.add_argument("dir")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("schema", help="list config keys, defaults and provenance")
    p.set_defaults(func=cmd_schema)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UnsafeInitialStateError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - the exit code contract covers every failure
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
