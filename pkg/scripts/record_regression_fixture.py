"""Record the optimizer regression fixture used by the test suite.

Usage: python scripts/record_regression_fixture.py [out.json]
"""

import json
import sys
from pathlib import Path

import numpy as np

from obstraj.config import ExperimentConfig
from obstraj.optimizer import evaluate_cost, limits_for, random_spline, solve

CASES = [
    {"kind": "mma", "seed": 11, "budget": 3},
    {"kind": "deterministic", "seed": 12, "budget": 1},
    {"kind": "stochastic", "seed": 13, "budget": 1},
]


def record(case: dict, cfg: ExperimentConfig) -> dict:
    base = random_spline(np.zeros(4), case["seed"], limits=cfg.limit_spec())
    res = solve(base, cfg.cost_spec(case["kind"]), limits_for(base, cfg.limit_spec()), case["budget"], cfg.solver_options())
    return {
        **case,
        "initial_cost": evaluate_cost(base, cfg.cost_spec(case["kind"])),
        "final_cost": res.final_cost,
        "knots": res.spline.knots.tolist(),
    }


def main(argv=None) -> None:
    argv = sys.argv[1:] if argv is None else argv
    out = Path(argv[0]) if argv else Path(__file__).resolve().parents[1] / "tests" / "data" / "optimizer_regression.json"
    cfg = ExperimentConfig()
    out.write_text(json.dumps([record(c, cfg) for c in CASES], indent=1) + "\n")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
