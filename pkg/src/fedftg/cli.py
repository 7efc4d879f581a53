"""Command line entry point: ``fedftg run | matrix | report | defaults``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from fedftg.config import ConfigError, parse_config, parse_variants, defaults_table
from fedftg.harness import (
    BUILTIN_VARIANTS,
    RunAborted,
    read_metrics,
    rounds_to_target,
    run_experiment,
    run_matrix,
)
from fedftg.server import DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2


def _floats(text: str) -> list[float]:
    return [float(p) for p in text.split(",") if p.strip()]


def _ints(text: str) -> list[int]:
    return [int(p) for p in text.split(",") if p.strip()]


def _cmd_run(args) -> int:
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_overrides({"run.seed": str(args.seed)})
    out = Path(args.out) if args.out else Path("runs") / f"{cfg.digest()}-s{cfg.seed}"
    targets = _floats(args.targets) if args.targets else []
    try:
        report = run_experiment(cfg, out_dir=out, serial=args.serial, targets=targets)
    except RunAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        _write_report(out, exc.report, targets)
        return EXIT_DIVERGED if exc.divergence else EXIT_CONFIG
    _write_report(out, report, targets)
    print(f"final_acc,{report.final_accuracy:.6f}")
    for t, r in report.rounds_to_target.items():
        print(f"rounds_to_{t},{'' if r is None else r}")
    print(f"out,{out}")
    return EXIT_OK


def _write_report(out: Path, report, targets) -> None:
    out.mkdir(parents=True, exist_ok=True)
    body = {
        "config_hash": report.config_hash,
        "rounds": len(report.metrics),
        "final_accuracy": report.final_accuracy if report.metrics else None,
        "rounds_to_target": {str(t): rounds_to_target(report, t) for t in targets},
        "wall_seconds": [m.seconds for m in report.metrics],
        "error": report.error,
    }
    (out / "report.json").write_text(json.dumps(body, indent=2) + "\n")


def _cmd_matrix(args) -> int:
    cfg = parse_config(args.config)
    if args.variants == "builtin":
        variants = BUILTIN_VARIANTS
    else:
        variants = parse_variants(args.variants)
    seeds = _ints(args.seeds)
    try:
        rows = run_matrix(cfg, variants, seeds, out_path=args.out, serial=True)
    except RunAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED if exc.divergence else EXIT_CONFIG
    print("variant,mean_acc,std_acc,n")
    for r in rows:
        print(f"{r.variant},{r.mean:.6f},{r.std:.6f},{len(r.accuracies)}")
    return EXIT_OK


def _cmd_report(args) -> int:
    run_dir = Path(args.run)
    metrics = read_metrics(run_dir / "metrics.csv")
    accs = [m.test_acc for m in metrics]
    print("target,round")
    for t in _floats(args.targets):
        r = rounds_to_target(accs, t)
        print(f"{t},{'' if r is None else r}")
    if accs:
        print(f"final,{accs[-1]:.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedftg", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log every round")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("--config", required=True)
    run.add_argument("--serial", action="store_true", help="single-threaded, byte-reproducible output")
    run.add_argument("--seed", type=int)
    run.add_argument("--out")
    run.add_argument("--targets", help="comma-separated accuracies for rounds-to-target")
    run.set_defaults(func=_cmd_run)

    mat = sub.add_parser("matrix", help="run variants x seeds and summarise final accuracy")
    mat.add_argument("--config", required=True)
    mat.add_argument("--variants", required=True, help="variants file, or 'builtin'")
    mat.add_argument("--seeds", required=True, help="comma-separated seeds")
    mat.add_argument("--out", help="write the comparison table as CSV")
    mat.set_defaults(func=_cmd_matrix)

    rep = sub.add_parser("report", help="rounds-to-target from a finished run")
    rep.add_argument("--run", required=True, help="run directory holding metrics.csv")
    rep.add_argument("--targets", required=True)
    rep.set_defaults(func=_cmd_report)

    dflt = sub.add_parser("defaults", help="print every config key with its default")
    dflt.set_defaults(func=lambda a: print(defaults_table()) or EXIT_OK)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
