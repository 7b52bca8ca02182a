"""Command line entry point: ``dpspider run|sweep|verify|report``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness

EXIT_OK, EXIT_VALIDATION, EXIT_EXECUTION = 0, 1, 2


def _load_config(args) -> harness.ExperimentConfig:
    cfg = harness.ExperimentConfig.from_file(args.config)
    updates: dict = {}
    if getattr(args, "seed", None) is not None:
        updates.setdefault("seeds", {})["master_seed"] = args.seed
    if getattr(args, "runs", None) is not None:
        updates.setdefault("seeds", {})["num_runs"] = args.runs
    if getattr(args, "workers", None) is not None:
        updates["workers"] = args.workers
    if getattr(args, "emit_trace", False):
        updates["emit_trace"] = True
    return cfg.replace(**updates) if updates else cfg


def cmd_run(args) -> int:
    cfg = _load_config(args)
    records = harness.run_experiment(cfg, out_dir=args.out)
    for rec in records:
        sosp = rec.get("sosp") or {}
        print(
            f"run {rec['run_index']}: status={rec['status']} halt={rec.get('halt_reason')} "
            f"steps={rec.get('steps')} data_used={rec.get('data_used')} "
            f"grad_norm={sosp.get('grad_norm')} min_eig={sosp.get('min_eig')} any_sosp={rec.get('any_sosp')}"
        )
    if args.out is None and harness._default_out_dir(cfg) is None:
        for rec in records:
            print(harness.dumps_record(harness.strip_wall_time(rec)))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    grid = harness.parse_grid(args.grid)
    rows = harness.sweep(cfg, grid, csv_path=args.csv, out_dir=args.out)
    for row in rows:
        print({k: row.get(k) for k in ("n", "d", "epsilon", "grad_norm_median", "sosp_runs", "error")})
    return EXIT_OK


def cmd_verify(args) -> int:
    results = harness.verify_records(args.record)
    bad = 0
    for idx, ok, msg in results:
        print(f"run {idx}: {'PASS' if ok else 'FAIL'} {msg}")
        bad += not ok
    return EXIT_OK if bad == 0 else EXIT_EXECUTION


def cmd_report(args) -> int:
    harness.report(args.csv, column=args.column)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpspider", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run every seed of one configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--runs", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help=f"output directory (default: config or ${harness.OUT_ENV})")
    p.add_argument("--emit-trace", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="grid over n / d / epsilon")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", required=True, help='e.g. "n=1000,10000,100000;epsilon=2"')
    p.add_argument("--csv", default="sweep.csv")
    p.add_argument("--seed", type=int)
    p.add_argument("--runs", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="recheck stored result records")
    p.add_argument("--record", required=True)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("report", help="fit log-log scaling slopes from a sweep CSV")
    p.add_argument("--csv", required=True)
    p.add_argument("--column", default="grad_norm_median")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (harness.ConfigError, json.JSONDecodeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_EXECUTION


if __name__ == "__main__":
    sys.exit(main())
