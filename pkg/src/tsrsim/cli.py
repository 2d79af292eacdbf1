"""Command-line entry point.

Subcommands: ``run`` (one experiment), ``compare`` (several configs over one
task), ``scale-table`` (communication/state scaling laws), ``selftest``
(invariant suite).  Exit codes: 0 success, 1 config error, 2 numerical
failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .harness import (ConfigError, NumericalFailure, compare_runs,
                      load_run_config, run_experiment, scaling_table, selftest)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tsrsim",
        description="Simulator for two-sided low-rank gradient communication "
                    "in data-parallel training.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment from a config file")
    run.add_argument("--config", required=True, help="flat key=value config file")
    _add_override_flags(run)

    cmp_ = sub.add_parser("compare", help="run several configs over one task")
    cmp_.add_argument("--config", action="append", required=True,
                      help="config file (repeat per method)")
    cmp_.add_argument("--out", help="output directory for compare/pareto CSVs")
    cmp_.add_argument("--steps", type=int, help="override step count for all runs")
    cmp_.add_argument("--workers", type=int, help="override worker count for all runs")

    tab = sub.add_parser("scale-table", help="emit the scaling-law table")
    tab.add_argument("--m", type=int, required=True)
    tab.add_argument("--n", type=int, required=True)
    tab.add_argument("--r", type=int, required=True)
    tab.add_argument("--r-emb", type=int, required=True)
    tab.add_argument("--vocab", type=int, required=True)
    tab.add_argument("--dtype-bytes", type=int, default=2, choices=(2, 4))
    tab.add_argument("--out", help="directory to write scale_table.txt into")

    sub.add_parser("selftest", help="run the invariant suite")
    return parser


def _add_override_flags(p: argparse.ArgumentParser):
    p.add_argument("--method", help="dense_adamw | one_sided | tsr_adam | tsr_sgd")
    p.add_argument("--rank", type=int)
    p.add_argument("--rank-emb", type=int, dest="rank_emb")
    p.add_argument("--refresh-k", type=int, dest="refresh_k")
    p.add_argument("--refresh-k-emb", type=int, dest="refresh_k_emb")
    p.add_argument("--workers", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--dtype-bytes", type=int, choices=(2, 4), dest="dtype_bytes")
    p.add_argument("--out")
    p.add_argument("--data-seed", type=int, dest="data_seed")
    p.add_argument("--omega-seed", type=int, dest="omega_seed")
    p.add_argument("--worker-pool", type=int, dest="worker_pool")
    p.add_argument("--diagnostics", action="store_true", default=None)


_OVERRIDE_KEYS = ("method", "rank", "rank_emb", "refresh_k", "refresh_k_emb",
                  "workers", "steps", "dtype_bytes", "out", "data_seed",
                  "omega_seed", "worker_pool", "diagnostics")


def _overrides_from_args(args) -> dict[str, str]:
    out = {}
    for key in _OVERRIDE_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            out[key] = str(val).lower() if isinstance(val, bool) else str(val)
    return out


def _cmd_run(args) -> int:
    cfg = load_run_config(args.config, _overrides_from_args(args))
    summaries = run_experiment(cfg)
    final = summaries[-1]
    print(f"steps={final.step} final_loss={final.loss:.6e} "
          f"cumulative_bytes={final.cumulative_bytes}")
    if cfg.out_dir:
        print(f"wrote summary.csv, ledger.csv, ledger_summary.csv"
              f"{', diagnostics.csv' if cfg.diagnostics else ''} to {cfg.out_dir}")
    return 0


def _cmd_compare(args) -> int:
    overrides = {}
    if args.steps is not None:
        overrides["steps"] = str(args.steps)
    if args.workers is not None:
        overrides["workers"] = str(args.workers)
    cfgs = [load_run_config(path, overrides) for path in args.config]
    results = compare_runs(cfgs, out_dir=args.out)
    for label, summaries in results.items():
        final = summaries[-1]
        print(f"{label}: final_loss={final.loss:.6e} "
              f"cumulative_bytes={final.cumulative_bytes}")
    if args.out:
        print(f"wrote compare.csv and pareto.csv to {args.out}")
    return 0


def _cmd_scale_table(args) -> int:
    table = scaling_table(args.m, args.n, args.r, args.r_emb, args.vocab,
                          args.dtype_bytes)
    text = table.format()
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "scale_table.txt").write_text(text + "\n")
        print(f"wrote scale_table.txt to {args.out}")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "compare":
            return _cmd_compare(args)
        if args.command == "scale-table":
            return _cmd_scale_table(args)
        if args.command == "selftest":
            return 0 if selftest() else 2
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
