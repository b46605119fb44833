"""Acceptance criteria A1-A8.

Each test prints one ``A<n> PASS|FAIL`` line with the measured quantities; the
lines are also repeated in the pytest terminal summary.
"""

import math
import time

import numpy as np
import pytest

from obstraj.config import ExperimentConfig
from obstraj.experiment import run_experiment
from obstraj.lie import lie_derivative, lie_gradient, observability_matrix, rank_diagnostic
from obstraj.metrics import (
    default_P0,
    default_extrinsics,
    e2log_trajectory,
    e2log_window,
    make_windows,
    stochastic_trajectory,
    weight_w1,
)
from obstraj.optimizer import random_spline
from obstraj.rigid_body import P_IC, AugmentedState, ExtrinsicParams, KinematicInput, VehicleState, boxplus
from obstraj.rigid_body import imu_measurement, quat_exp, quat_multiply
from obstraj.sim import NoiseSpec, ekf_calibrate, nees_monte_carlo, run_calibration, simulate_run, truth_state
from obstraj.spline import UniformSpline, derivative_knots

from conftest import random_input, random_state
from oracles import central_diff, de_boor_eval

RESULTS = {}


def report(name, ok, detail):
    line = f"{name} {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[name] = line
    print(line)
    assert ok, line


def _simpson(f, H, n=2000):
    t = np.linspace(0.0, H, n + 1)
    w = np.ones(n + 1)
    w[1:-1:2], w[2:-1:2] = 4, 2
    return H / (3 * n) * np.tensordot(w, f(t), axes=1)


def test_a1_gradient_correctness():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(20):
        s, u = random_state(rng), random_input(rng)
        m = imu_measurement(s, u)
        ref = quat_multiply(s.vehicle.q_WI, s.extrinsics.q_IC)
        for order in (0, 1, 2):
            G = lie_gradient(order, s, m)
            fd = central_diff(lambda d: lie_derivative(order, boxplus(s, d), m, q_ref=ref), np.zeros(21), 1e-5)
            worst = max(worst, np.linalg.norm(G - fd) / np.linalg.norm(fd))
    elapsed = time.perf_counter() - start
    report("A1", worst < 1e-4 and elapsed < 10, f"max rel err {worst:.2e} (< 1e-4), {elapsed:.1f} s (< 10 s)")


def test_a2_metric_algebra():
    start = time.perf_counter()
    H, r = 0.2, 2
    W = weight_w1(H, r)
    exact = all(
        np.array_equal(
            W[6 * i : 6 * i + 6, 6 * j : 6 * j + 6],
            H ** (i + j + 1) / ((i + j + 1) * math.factorial(i) * math.factorial(j)) * np.eye(6),
        )
        for i in range(r + 1)
        for j in range(r + 1)
    )
    rng = np.random.default_rng(7)
    quad = 0.0
    for _ in range(5):
        O = observability_matrix(random_state(rng), random_input(rng)).rows
        blocks = [O[6 * i : 6 * i + 6] for i in range(3)]

        def integrand(t):
            g = sum(np.multiply.outer(t**i / math.factorial(i), blocks[i]) for i in range(3))
            return np.einsum("tki,tkj->tij", g, g)

        ref = _simpson(integrand, H)
        quad = max(quad, np.linalg.norm(e2log_window(O, H) - ref) / np.linalg.norm(ref))
    min_a, min_b = np.inf, np.inf
    for seed in range(3):
        traj = random_spline(np.zeros(4), seed)
        win = make_windows(traj, H, 0.1, 0.005)
        A = e2log_trajectory(traj, win).matrix
        B = stochastic_trajectory(traj, win).matrix
        min_a = min(min_a, np.linalg.eigvalsh(A).min() / np.linalg.eigvalsh(A).max())
        min_b = min(min_b, np.linalg.eigvalsh(B).min())
    elapsed = time.perf_counter() - start
    ok = exact and quad < 1e-6 and min_a > -1e-12 and min_b > 0 and elapsed < 30
    report(
        "A2",
        ok,
        f"W1 exact {exact}, quadrature rel err {quad:.1e} (< 1e-6), "
        f"A min eig/max {min_a:.1e} (>= 0), B min eig {min_b:.2e} (> 0), {elapsed:.1f} s (< 30 s)",
    )


def test_a3_hover_unobservability():
    ex = ExtrinsicParams([0.1, 0.02, -0.03], quat_exp([0.0, 0.087, 0.0]))
    O = observability_matrix(AugmentedState(VehicleState(), ex), KinematicInput())
    rep = rank_diagnostic(O)
    P0 = default_P0()
    hover = UniformSpline(np.zeros((15, 4)), 6, 0.5)
    truth = default_extrinsics()
    imu, pose = simulate_run(hover, truth, NoiseSpec(), seed=0)
    guess = truth_state(imu).with_extrinsics(p_IC=truth.p_IC + np.array([0.0, 0.0, 0.05]))
    res = ekf_calibrate(imu, pose, guess, P0, NoiseSpec())
    ratio = np.diag(res.ext_cov[-1, :3, :3]) / np.diag(P0[P_IC, P_IC])
    ok = rep.rank <= 18 and rep.null_rank_in(P_IC) == 3 and ratio.min() >= 0.5
    report(
        "A3",
        ok,
        f"rank {rep.rank}/21 (<= 18), p_IC null directions {rep.null_rank_in(P_IC)}/3, "
        f"final/initial p_IC variance min {ratio.min():.2f} (>= 0.5)",
    )


@pytest.fixture(scope="module")
def default_experiment(tmp_path_factory):
    start = time.perf_counter()
    res = run_experiment(ExperimentConfig(), tmp_path_factory.mktemp("experiment"))
    return res, time.perf_counter() - start


def _row(res, method):
    return next(r for r in res.table if r["method"] == method)


def test_a4_comparison_trend(default_experiment):
    res, elapsed = default_experiment
    e = {m: res.mean_error(m, 400) for m in ("random", "deterministic", "stochastic")}
    ok = not res.failures and e["deterministic"] < e["random"] and e["stochastic"] < e["random"] and elapsed < 1800
    report(
        "A4",
        ok,
        f"mean SSE at 400 landmarks: det {e['deterministic']:.4g}, stoch {e['stochastic']:.4g}, "
        f"random {e['random']:.4g}; failures {len(res.failures)}; {elapsed / 60:.1f} min (< 30 min)",
    )


def test_a5_cost_ordering(default_experiment):
    res, _ = default_experiment
    c = {m: _row(res, m)["norm_cost"] for m in ("mma", "stochastic", "random", "deterministic")}
    ok = c["mma"] < c["stochastic"] < c["random"] < c["deterministic"] and c["mma"] < 0.1 and c["deterministic"] == 1.0
    report(
        "A5",
        ok,
        "normalized cost " + ", ".join(f"{m} {v:.3f}" for m, v in c.items())
        + " (need mma < stochastic < random < deterministic = 1, mma < 0.1)",
    )


def test_a6_quality_sensitivity(default_experiment):
    res, _ = default_experiment
    ok, parts = True, []
    for m in ("deterministic", "stochastic"):
        e4, e40, e400 = (res.mean_error(m, q) for q in (4, 40, 400))
        ok &= e4 > e40 > e400 and (e4 - e40) > (e40 - e400)
        parts.append(f"{m}: {e4:.4g} > {e40:.4g} > {e400:.4g}")
    report("A6", ok, "; ".join(parts) + " (and 40->4 drop > 400->40 drop)")


def test_a7_filter_consistency(excited_spline):
    start = time.perf_counter()
    P0 = default_P0()
    # initial extrinsic and vehicle errors are drawn from P0
    runs = [
        run_calibration(excited_spline, default_extrinsics(), NoiseSpec(), P0, seed=s, ext_offset=None)
        for s in range(50)
    ]
    summary = nees_monte_carlo(runs)
    elapsed = time.perf_counter() - start
    ok = summary.fraction_inside >= 0.9 and elapsed < 600
    lo, hi = summary.bounds
    report(
        "A7",
        ok,
        f"{100 * summary.fraction_inside:.1f}% of steps inside [{lo:.2f}, {hi:.2f}] (>= 90%), "
        f"median NEES {np.median(summary.mean_nees):.2f}, {elapsed:.0f} s (< 600 s)",
    )


def _hull_violation(s, t):
    y = s.eval(t)
    seg = np.clip(np.floor((t - s.t_start) / s.dt_knot).astype(int), 0, s.n_knots - s.order)
    active = np.stack([s.knots[seg + j] for j in range(s.order)], axis=1)
    worst = np.max(np.maximum(active.min(axis=1) - y, y - active.max(axis=1)))
    for d in (1, 2):
        bound = np.abs(derivative_knots(s, d)).max(axis=0)
        worst = max(worst, np.max(np.abs(s.eval(t, d)) - bound))
    return worst


def test_a8_spline_correctness():
    rng = np.random.default_rng(88)
    err = 0.0
    for k in (2, 3, 4, 5, 6):
        s = UniformSpline(rng.normal(size=(15, 4)), k, float(rng.uniform(0.2, 1.0)), float(rng.normal()))
        t = np.linspace(s.t_start, s.t_end, 200)
        ref = np.array([de_boor_eval(s.knots, k, s.dt_knot, s.t0, ti) for ti in t])
        err = max(err, np.max(np.abs(s.eval(t) - ref)))
    hull = -np.inf
    for seed in range(100):
        r = np.random.default_rng(seed)
        s = UniformSpline(r.normal(size=(15, 4)), 6, 0.5)
        hull = max(hull, _hull_violation(s, np.linspace(s.t_start, s.t_end, 10_000)))
    ok = err < 1e-12 and hull <= 1e-12
    report("A8", ok, f"max |cumulative - de Boor| {err:.1e} (< 1e-12), worst hull excess {hull:.1e} (<= 0) over 100 splines")
