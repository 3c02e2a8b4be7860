"""Command-line entry point.

Subcommands: run (one experiment), profile (role/sampling sweep), control
(controller experiment; run with a controller preselected), compare
(side-by-side table from finished run directories).

Exit codes: 0 success, 2 configuration error, 3 runtime failure threshold
exceeded (more than half of the mature executions failed).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, load_config
from .experiment import (CONTROLLERS, MODES, CompareError, ExperimentPlan,
                         compare, profile_roles, run_experiment,
                         write_compare_csv, write_profile_csv)
from .services import RECOMMENDER_ASSIGNMENTS, SEARCH_ASSIGNMENTS

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="configuration document path")
    parser.add_argument("--seed", type=int, default=None, help="override rngSeed")
    parser.add_argument("--time", choices=("virtual", "real"), default=None,
                        help="override timeMode")
    parser.add_argument("--out", default=None, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qmesh")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment")
    _add_common(p_run)
    p_run.add_argument("--mode", choices=[m for m in MODES if m != "baseline"] + ["baseline"],
                       default="ubora")
    p_run.add_argument("--controller", choices=CONTROLLERS, default="none")
    p_run.add_argument("--assignment", default=None,
                       help="role assignment preset (service specific)")

    p_profile = sub.add_parser("profile", help="sweep role assignments and sampling rates")
    _add_common(p_profile)
    p_profile.add_argument("--mode", choices=[m for m in MODES if m != "baseline"],
                           default="ubora")
    p_profile.add_argument("--assignments", default=None,
                           help="comma-separated presets (default: all for the service)")
    p_profile.add_argument("--rates", default="0.05,0.1,0.2,0.4",
                           help="comma-separated sampling fractions")

    p_control = sub.add_parser("control", help="run an admission-control experiment")
    _add_common(p_control)
    p_control.add_argument("--mode", choices=[m for m in MODES if m != "baseline"],
                           default="ubora")
    p_control.add_argument("--controller", choices=[c for c in CONTROLLERS if c != "none"],
                           default="quality-pid")

    p_compare = sub.add_parser("compare", help="compare finished runs")
    p_compare.add_argument("run_dirs", nargs="+", help="run output directories")
    p_compare.add_argument("--out", default=None, help="write comparison CSV here")
    return parser


def _load(args) -> "RunConfig":
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, rng_seed=args.seed)
    if args.time is not None:
        cfg = replace(cfg, time_mode=args.time)
    return cfg


def _finish(result) -> int:
    summary = result.summary
    print(f"queries={summary['queries']} sampled={summary['sampled']} "
          f"mature_success={summary['mature_success']} "
          f"mature_failed={summary['mature_failed']} "
          f"throughput={summary['throughput']:.4f}")
    if result.out_dir is not None:
        print(f"artifacts: {result.out_dir}")
    failures = summary["mature_failed"]
    attempts = failures + summary["mature_success"]
    if attempts > 0 and failures / attempts > 0.5:
        print("error: more than half of mature executions failed", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "compare":
            rows = compare(args.run_dirs)
            for row in rows:
                print(f"{row['run']}: mode={row['mode']} controller={row['controller']} "
                      f"throughput={row['throughput']:.4f} "
                      f"gain={row['throughput_gain_vs_first']:.3f}")
            if args.out:
                write_compare_csv(args.out, rows)
            return EXIT_OK

        cfg = _load(args)
        if args.command == "run":
            plan = ExperimentPlan(config=cfg, mode=args.mode, controller=args.controller,
                                  out_dir=Path(args.out) if args.out else None,
                                  assignment=args.assignment)
            return _finish(run_experiment(plan))

        if args.command == "control":
            plan = ExperimentPlan(config=cfg, mode=args.mode, controller=args.controller,
                                  out_dir=Path(args.out) if args.out else None)
            return _finish(run_experiment(plan))

        if args.command == "profile":
            if args.assignments:
                assignments = [a.strip() for a in args.assignments.split(",") if a.strip()]
            elif cfg.service.kind == "recommender":
                assignments = list(RECOMMENDER_ASSIGNMENTS)
            else:
                assignments = list(SEARCH_ASSIGNMENTS)
            rates = [float(r) for r in args.rates.split(",") if r.strip()]
            profile = profile_roles(cfg, assignments, rates, mode=args.mode)
            for (assignment, rate), tput in profile["cells"].items():
                marker = " <-- best" if (assignment, rate) == profile["best"] else ""
                print(f"{assignment} rate={rate}: throughput={tput:.4f}{marker}")
            if args.out:
                out = Path(args.out)
                out.mkdir(parents=True, exist_ok=True)
                write_profile_csv(out / "profile.csv", profile)
            return EXIT_OK
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, CompareError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
