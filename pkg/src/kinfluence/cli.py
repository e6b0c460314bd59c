"""Command-line front end.

Exit codes: 0 success, 2 configuration/format errors, 3 numerical failures.
"""

from __future__ import annotations

import argparse
import json
import sys

from .errors import ConfigError, KinfluenceError, NumericalError
from .experiments import (
    load_config,
    measure_cold,
    run_infinite_experiment,
    run_lambda_sweep,
    run_training,
    run_unlearning_experiment,
)
from .report import METRICS_HEADER


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="key-value config file")
    p.add_argument("--seed", type=int, default=None, help="override the seed list")
    p.add_argument("--out", default=None, help="output directory (or file for --cold)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kinf",
                                     description="influence-function unlearning benchmark")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train the configured model, write a checkpoint")
    _add_common(p_train)

    p_unlearn = sub.add_parser("unlearn", help="run the unlearning protocol")
    _add_common(p_unlearn)
    p_unlearn.add_argument("--space", choices=["theta", "dual", "both"], default=None)
    p_unlearn.add_argument("--percent", default=None,
                           help="comma-separated removal percents")
    p_unlearn.add_argument("--shards", type=int, default=None)
    p_unlearn.add_argument("--cold", action="store_true",
                           help="measure one cold start and write it as JSON to --out")

    p_sweep = sub.add_parser("sweep-lambda", help="joint training-dynamics sweep")
    _add_common(p_sweep)
    p_sweep.add_argument("--lambdas", default=None, help="comma-separated values")

    p_inf = sub.add_parser("ntk-infinite", help="infinite-width estimate-vs-actual run")
    _add_common(p_inf)
    p_inf.add_argument("--percent", default=None)

    p_rep = sub.add_parser("report", help="aggregate metrics CSVs under a results dir")
    p_rep.add_argument("--out", required=True, help="results directory to scan")
    return parser


def _overrides(args) -> dict:
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seeds"] = str(args.seed)
    if getattr(args, "out", None) is not None and not getattr(args, "cold", False):
        over["out"] = args.out
    if getattr(args, "space", None) is not None:
        over["unlearn.space"] = args.space
    if getattr(args, "percent", None) is not None:
        over["unlearn.percents"] = args.percent
    if getattr(args, "shards", None) is not None:
        over["unlearn.shards"] = str(args.shards)
    if getattr(args, "lambdas", None) is not None:
        over["sweep.lambdas"] = args.lambdas
    return over


def _cmd_unlearn(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    if args.cold:
        if args.out is None:
            raise ConfigError("--cold needs --out <file.json>")
        if len(cfg.percents) != 1 or cfg.space == "both":
            raise ConfigError("--cold measures exactly one (percent, space) pair")
        seed = cfg.seeds[0]
        cold = measure_cold(cfg, seed, cfg.percents[0], cfg.space)
        with open(args.out, "w") as f:
            json.dump({"cold_runtime_s": cold, "seed": seed,
                       "percent": cfg.percents[0], "space": cfg.space}, f)
        return 0
    rows = run_unlearning_experiment(cfg)
    print(",".join(METRICS_HEADER))
    for row in rows:
        print(",".join(str(v) for v in row.as_list()))
    return 0


def _cmd_report(args) -> int:
    import csv
    import os
    found = []
    for root, _dirs, files in os.walk(args.out):
        if "metrics.csv" in files and os.path.basename(root).startswith("seed_"):
            with open(os.path.join(root, "metrics.csv")) as f:
                rows = list(csv.reader(f))
            found.extend(rows[1:])
    if not found:
        raise ConfigError(f"no per-seed metrics.csv files under {args.out}")
    print(",".join(METRICS_HEADER))
    for row in sorted(found, key=lambda r: (int(r[0]), float(r[1]), r[2])):
        print(",".join(row))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            cfg = load_config(args.config, _overrides(args))
            run_training(cfg)
            return 0
        if args.command == "unlearn":
            return _cmd_unlearn(args)
        if args.command == "sweep-lambda":
            cfg = load_config(args.config, _overrides(args))
            run_lambda_sweep(cfg)
            return 0
        if args.command == "ntk-infinite":
            cfg = load_config(args.config, _overrides(args))
            percent = float(args.percent) if args.percent else None
            run_infinite_experiment(cfg, percent)
            return 0
        if args.command == "report":
            return _cmd_report(args)
        raise ConfigError(f"unknown command {args.command!r}")
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except KinfluenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
