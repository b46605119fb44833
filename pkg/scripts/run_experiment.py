"""Run the comparison protocol and print the summary table with the trend checks.

Usage: python scripts/run_experiment.py [config.json] [out_dir]
"""

import sys
import time

from obstraj.config import ExperimentConfig, load_config
from obstraj.experiment import run_experiment


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    cfg = load_config(argv[0]) if argv else ExperimentConfig()
    out = argv[1] if len(argv) > 1 else cfg.out_dir
    start = time.perf_counter()
    res = run_experiment(cfg, out)
    print(f"finished in {(time.perf_counter() - start) / 60:.1f} min; outputs in {res.out_dir}")
    for row in res.table:
        print("  ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    methods = {row["method"] for row in res.table}
    qs = cfg.qualities
    if {"random", "deterministic", "stochastic"} <= methods:
        top = max(qs)
        e = {m: res.mean_error(m, top) for m in ("random", "deterministic", "stochastic")}
        print(f"q{top}: deterministic < random {e['deterministic'] < e['random']}, "
              f"stochastic < random {e['stochastic'] < e['random']}")
    for m in ("deterministic", "stochastic"):
        if m in methods and len(qs) == 3:
            lo, mid, hi = (res.mean_error(m, q) for q in sorted(qs))
            print(f"{m}: errors decrease with quality {lo > mid > hi}, largest drop at the low end {lo - mid > mid - hi}")
    if res.failures:
        print(f"{len(res.failures)} failed run(s); see failures.json")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
