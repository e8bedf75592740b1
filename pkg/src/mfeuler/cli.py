"""Command line entry point: ``mfeuler run|sweep|calibrate|report``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure (a JSONL
diagnostic record is written to the output directory and stderr).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import calibration, lab
from .euler2d import CFLError
from .lab import ConfigError, ScenarioConfig
from .nbody import CollisionError
from .smearing import ResolutionError
from .torus_coulomb import ConvergenceError, SingularityError

log = logging.getLogger("mfeuler")

NUMERICAL_ERRORS = (CFLError, CollisionError, SingularityError, ConvergenceError,
                    ResolutionError, FloatingPointError)

SUITES = {
    # name: (static seed, static configs, Gronwall Ns, Gronwall seeds)
    "default": (1, 1000, (256, 1024, 4096), (101, 102)),
    "quick": (1, 24, (64,), (101,)),
}


def _fail(out_dir, command, exc):
    rec = {"command": command, "error": type(exc).__name__, "message": str(exc), "time": time.time()}
    line = json.dumps(rec, sort_keys=True)
    print(line, file=sys.stderr)
    if out_dir is not None:
        try:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            with open(Path(out_dir) / "failure.jsonl", "a") as fh:
                fh.write(line + "\n")
        except OSError:
            pass
    return 3


def _write_all(report, out_dir):
    paths = []
    for fmt in ("jsonl", "csv", "svg"):
        paths += lab.emit_report(report, fmt, out_dir)
    return paths


def cmd_run(args):
    cfg = ScenarioConfig.load(args.config)
    out = args.out or cfg.output_dir
    try:
        report = lab.run_scenario(cfg, seed=args.seed)
    except NUMERICAL_ERRORS as exc:
        return _fail(out, "run", exc)
    for p in _write_all(report, out):
        log.info("wrote %s", p)
    return 0


def cmd_sweep(args):
    cfg = ScenarioConfig.load(args.config)
    out = args.out or cfg.output_dir
    report = lab.sweep(cfg, workers=args.workers)
    for p in _write_all(report, out):
        log.info("wrote %s", p)
    if report.failures:
        with open(Path(out) / "failure.jsonl", "w") as fh:
            for f in report.failures:
                fh.write(json.dumps(f, sort_keys=True) + "\n")
        log.warning("%d sweep cells failed", len(report.failures))
        return 3 if not report.records else 0
    return 0


def cmd_calibrate(args):
    if args.suite not in SUITES:
        raise ConfigError(f"unknown suite {args.suite!r}; choose from {sorted(SUITES)}")
    seed, n, Ns, seeds = SUITES[args.suite]
    n = args.n_configs or n

    def progress(i, raw):
        if (i + 1) % 50 == 0:
            log.info("static suite: %d/%d", i + 1, n)

    try:
        constants, stats = calibration.calibrate_static(seed, n, progress=progress)
        runs = lab.gronwall_calibration_runs(Ns=Ns, seeds=seeds)
        constants["gronwall"], stats["gronwall"] = calibration.calibrate_gronwall(runs)
    except NUMERICAL_ERRORS as exc:
        return _fail(args.out, "calibrate", exc)
    meta = {"suite": args.suite, "static_seed": seed, "n_configs": n, "gronwall_N": list(Ns),
            "gronwall_seeds": list(seeds), "safety": calibration.SAFETY}
    path = calibration.write_constants(constants, stats, meta, args.output or calibration.DEFAULT_PATH)
    log.info("wrote %s", path)
    print(json.dumps(constants, sort_keys=True))
    return 0


def cmd_report(args):
    src = Path(args.inp) / "records.jsonl"
    if not src.exists():
        raise ConfigError(f"no records.jsonl in {args.inp}")
    report = lab.report_from_records(lab.read_jsonl(src))
    for p in lab.emit_report(report, args.format, args.out or args.inp):
        log.info("wrote %s", p)
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="mfeuler", description="Coupled particle/Euler experiments on the torus.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="single scenario")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="(N, theta) sweep")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("calibrate", help="fit and freeze inequality constants")
    p.add_argument("--suite", default="default")
    p.add_argument("--n-configs", type=int)
    p.add_argument("--output", help="constants file (default: packaged calibration.json)")
    p.add_argument("--out", help="directory for failure records")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("report", help="re-emit reports from a run directory")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--format", choices=("csv", "svg", "jsonl"), default="csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
