"""Filter consistency versus the vehicle-attitude prior.

Runs Monte Carlo batches on one excited trajectory with initial errors drawn
from the prior, scaling the vehicle-attitude variance, and prints the fraction
of pose updates whose run-averaged NEES falls in the 95% chi-square envelope.

Usage: python scripts/nees_study.py [n_runs] [sigma_deg ...]
"""

import sys

import numpy as np

from obstraj.metrics import default_P0, default_extrinsics
from obstraj.optimizer import random_spline
from obstraj.rigid_body import TH_WI, NoiseSpec
from obstraj.sim import nees_monte_carlo, run_calibration


def study(n_runs: int, sigma_deg: float, traj_seed: int = 0):
    traj = random_spline(np.zeros(4), traj_seed)
    P0 = default_P0()
    P0[TH_WI, TH_WI] = np.eye(3) * np.deg2rad(sigma_deg) ** 2
    runs = [
        run_calibration(traj, default_extrinsics(), NoiseSpec(), P0, seed=s, ext_offset=None) for s in range(n_runs)
    ]
    return nees_monte_carlo(runs)


def main(argv=None) -> None:
    argv = sys.argv[1:] if argv is None else argv
    n_runs = int(argv[0]) if argv else 50
    sigmas = [float(a) for a in argv[1:]] or [0.5, 1.0, 2.5, 5.0]
    print("sigma_deg,fraction_inside,median_nees,max_nees,lower,upper")
    for sd in sigmas:
        s = study(n_runs, sd)
        print(f"{sd},{s.fraction_inside:.3f},{np.median(s.mean_nees):.3f},{s.mean_nees.max():.3f},{s.bounds[0]:.3f},{s.bounds[1]:.3f}")


if __name__ == "__main__":
    main()
