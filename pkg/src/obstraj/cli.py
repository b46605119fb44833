"""Command-line front end.

Subcommands: ``gen``, ``optimize``, ``simulate``, ``experiment``, ``describe``.
Exit codes: 0 success, 1 run failures (see the failures manifest), 2 config or input errors.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .experiment import describe_trajectory, run_experiment
from .metrics import default_P0
from .optimizer import InfeasibleProblemError, SamplingError, limits_for, random_spline, solve
from .sim import FilterDivergence, QualityLevel, run_calibration
from .spline import FlatnessSingularityError, SplineDomainError, SplineFormatError, load_spline, save_spline

EXIT_OK, EXIT_RUN_FAILURE, EXIT_CONFIG = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file (unknown keys are rejected)")
    common.add_argument("--seed", type=int, help="seed (master seed for 'experiment')")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="obstraj", description=__doc__.splitlines()[0])
    p.add_argument("--dump-config", action="store_true", help="print the effective config as JSON and exit")
    p.add_argument("--config", type=Path, dest="top_config", help=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command")

    g = sub.add_parser("gen", parents=[common], help="random feasible spline")
    g.add_argument("--out", type=Path, required=True)

    o = sub.add_parser("optimize", parents=[common], help="optimize a spline")
    o.add_argument("spline", type=Path)
    o.add_argument("--method", choices=["mma", "deterministic", "stochastic"], required=True)
    o.add_argument("--out", type=Path, required=True)
    o.add_argument("--budget", type=int)

    s = sub.add_parser("simulate", parents=[common], help="simulate and filter one run")
    s.add_argument("spline", type=Path)
    s.add_argument("--quality", type=int, default=400, help="landmark count")
    s.add_argument("--out", type=Path, required=True, help="CSV of the error series")

    e = sub.add_parser("experiment", parents=[common], help="full comparison protocol")
    e.add_argument("--out", type=Path)
    e.add_argument("--method", action="append", help="restrict to these methods (repeatable)")
    e.add_argument("--quality", type=int, action="append", help="restrict to these landmark counts (repeatable)")

    d = sub.add_parser("describe", parents=[common], help="trajectory report")
    d.add_argument("spline", type=Path)
    return p


def _config(args) -> ExperimentConfig:
    path = getattr(args, "config", None) or getattr(args, "top_config", None)
    cfg = load_config(path) if path else ExperimentConfig()
    if getattr(args, "seed", None) is not None and args.command == "experiment":
        cfg.master_seed = args.seed
    if args.command == "experiment":
        if args.method:
            cfg.methods = list(dict.fromkeys(args.method))
        if args.quality:
            cfg.qualities = list(dict.fromkeys(args.quality))
        if args.out:
            cfg.out_dir = str(args.out)
        cfg.validate()
    return cfg


def main(argv=None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING)
    try:
        cfg = _config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.dump_config:
        sys.stdout.write(dump_config(cfg))
        return EXIT_OK
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_CONFIG
    seed = args.seed if args.seed is not None else cfg.master_seed
    try:
        if args.command == "gen":
            spl = random_spline(
                np.zeros(4), seed, cfg.n_knots, cfg.dt_knot, cfg.limit_spec(), cfg.spline_order,
                cfg.end_radius, cfg.yaw_range, cfg.wiggle,
            )
            save_spline(spl, args.out)
            print(f"wrote {args.out} (span {spl.span:.3f} s)")
        elif args.command == "optimize":
            spl = load_spline(args.spline)
            budget = cfg.budget if args.budget is None else args.budget
            res = solve(spl, cfg.cost_spec(args.method), limits_for(spl, cfg.limit_spec()), budget, cfg.solver_options())
            save_spline(res.spline, args.out)
            log_path = args.out.with_suffix(".log.csv")
            log_path.write_text(res.log_csv())
            print(f"cost {res.initial_cost:.9g} -> {res.final_cost:.9g}; wrote {args.out} and {log_path}")
        elif args.command == "simulate":
            spl = load_spline(args.spline)
            offset = (cfg.init_offset_m, float(np.deg2rad(cfg.init_offset_deg)))
            res = run_calibration(
                spl, cfg.truth(), cfg.noise_spec(), default_P0(), cfg.rates(), QualityLevel(args.quality), seed, offset
            )
            args.out.write_text(res.to_csv())
            print(f"sum_sq_error {res.sum_sq_error:.6g}  accel_cost {res.accel_cost:.6g}; wrote {args.out}")
        elif args.command == "experiment":
            result = run_experiment(cfg)
            for row in result.table:
                print("  ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
            if result.failures:
                print(f"{len(result.failures)} run(s) failed; see {result.out_dir / 'failures.json'}", file=sys.stderr)
                return EXIT_RUN_FAILURE
        elif args.command == "describe":
            sys.stdout.write(describe_trajectory(load_spline(args.spline), cfg).format())
    except (SplineFormatError, ConfigError, InfeasibleProblemError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FilterDivergence, FlatnessSingularityError, SplineDomainError, SamplingError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUN_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
