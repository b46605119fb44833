"""Constrained knot optimization and random trajectory generation.

Knots are optimized under linear inequality constraints on the derivative
knots (sufficient by the convex hull property) and on the first/last ``k``
knots. The solver is an augmented Lagrangian (PHR form for inequalities) whose
inner problem is solved with L-BFGS-B on central-difference gradients. Every
outer iterate is projected onto the feasible set, so the best feasible iterate
is always available.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import minimize

from .lie import LieOrderConfig, rank_diagnostic
from .metrics import (
    DEFAULT_CAM_DT,
    DEFAULT_IMU_DT,
    SelectionSpec,
    default_extrinsics,
    default_P0,
    e2log_matrices,
    make_windows,
    scalarize_matrix,
    stochastic_matrices,
)
from .rigid_body import GRAVITY, ExtrinsicParams
from .spline import DEFAULT_ORDER, UniformSpline, evaluate

log = logging.getLogger(__name__)

CostKind = Literal["deterministic", "stochastic", "mma"]
FEAS_TOL = 1e-6
_PROJ_MARGIN = 1e-8


class InfeasibleProblemError(ValueError):
    pass


@dataclass(frozen=True)
class Limits:
    v_max: tuple = (2.0, 2.0, 2.0, 1.5)
    a_max: tuple = (5.0, 5.0, 5.0, 3.0)
    eps: tuple = (0.1, 0.1, 0.1, 0.1)
    y_start: tuple = (0.0, 0.0, 0.0, 0.0)
    y_end: tuple = (0.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        for name in ("v_max", "a_max", "eps", "y_start", "y_end"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape != (4,) or not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be a finite 4-vector")
            object.__setattr__(self, name, tuple(float(x) for x in v))
        if min(self.v_max) <= 0 or min(self.a_max) <= 0:
            raise ValueError("v_max and a_max must be positive")
        if min(self.eps) < 0:
            raise ValueError("eps must be non-negative")

    def with_endpoints(self, y_start, y_end) -> "Limits":
        return replace(self, y_start=tuple(y_start), y_end=tuple(y_end))


@dataclass(frozen=True)
class CostSpec:
    kind: CostKind = "deterministic"
    selection: SelectionSpec = field(default_factory=SelectionSpec)
    lie: LieOrderConfig = field(default_factory=LieOrderConfig)
    H: float = 0.2
    cam_dt: float = DEFAULT_CAM_DT
    imu_dt: float = DEFAULT_IMU_DT
    mode: str = "trace"
    W3: tuple = ((1.0, 0, 0, 0), (0, 1.0, 0, 0), (0, 0, 1.0, 0), (0, 0, 0, 1.0))
    accel_weight: float = 0.0  # optional J_obs + w * J_accel blend, off by default
    extrinsics: ExtrinsicParams | None = None
    P0: NDArray | None = None
    g: tuple = GRAVITY

    def __post_init__(self):
        if self.kind not in ("deterministic", "stochastic", "mma"):
            raise ValueError(f"unknown cost kind {self.kind!r}")
        W3 = np.asarray(self.W3, dtype=float)
        if W3.shape != (4, 4):
            raise ValueError("W3 must be 4x4")
        if self.accel_weight < 0:
            raise ValueError("accel_weight must be non-negative")


# ---------------------------------------------------------------------------
# costs
# ---------------------------------------------------------------------------


def _simpson_grid(spline: UniformSpline, step: float = 1e-3):
    n = int(np.ceil(spline.span / step))
    n += n % 2
    t = np.linspace(spline.t_start, spline.t_end, n + 1)
    w = np.ones(n + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return t, w * (spline.span / n) / 3.0


def accel_cost_batch(knots, spline: UniformSpline, W3=None) -> NDArray:
    W3 = np.eye(4) if W3 is None else np.asarray(W3, dtype=float)
    t, w = _simpson_grid(spline)
    acc = evaluate(knots, spline.order, spline.dt_knot, spline.t0, t, 2)
    integrand = np.einsum("...i,ij,...j->...", acc, W3, acc)
    return integrand @ w


def accel_cost(spline: UniformSpline, W3=None) -> float:
    """Integrated weighted squared acceleration over the span (Simpson, 1 ms step)."""
    return float(accel_cost_batch(spline.knots, spline, W3))


def cost_batch(knots, template: UniformSpline, cost: CostSpec) -> NDArray:
    """Minimization cost for knot arrays of shape ``(..., N+1, 4)``."""
    knots = np.asarray(knots, dtype=float)
    if cost.kind == "mma":
        return accel_cost_batch(knots, template, cost.W3)
    windows = make_windows(template, cost.H, cost.cam_dt, cost.imu_dt)
    ex = cost.extrinsics or default_extrinsics()
    if cost.kind == "deterministic":
        M = e2log_matrices(knots, template, windows, cost.lie, ex, cost.g)
    else:
        P0 = default_P0() if cost.P0 is None else cost.P0
        M = stochastic_matrices(knots, template, windows, P0, cost.lie, ex, cost.g)
    J = scalarize_matrix(M, cost.selection, cost.mode)
    if cost.accel_weight:
        J = J + cost.accel_weight * accel_cost_batch(knots, template, cost.W3)
    return J


def evaluate_cost(spline: UniformSpline, cost: CostSpec) -> float:
    return float(cost_batch(spline.knots, spline, cost))


# ---------------------------------------------------------------------------
# constraints
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ViolationReport:
    """Per-channel maximum violation of each constraint family (<= 0 means satisfied)."""

    velocity: NDArray
    acceleration: NDArray
    start: NDArray
    end: NDArray

    @property
    def max_violation(self) -> float:
        return float(max(np.max(self.velocity), np.max(self.acceleration), np.max(self.start), np.max(self.end)))

    @property
    def feasible(self) -> bool:
        return self.max_violation <= FEAS_TOL


def constraint_violations(spline: UniformSpline, limits: Limits) -> ViolationReport:
    Y = spline.knots
    k = spline.order
    vel = np.abs(np.diff(Y, axis=0)) / spline.dt_knot
    acc = np.abs(np.diff(Y, n=2, axis=0)) / spline.dt_knot**2
    eps = np.asarray(limits.eps)
    start = np.abs(Y[:k] - np.asarray(limits.y_start)) - eps
    end = np.abs(Y[-k:] - np.asarray(limits.y_end)) - eps
    return ViolationReport(
        vel.max(axis=0) - np.asarray(limits.v_max),
        acc.max(axis=0) - np.asarray(limits.a_max) if len(acc) else np.full(4, -np.inf),
        start.max(axis=0),
        end.max(axis=0),
    )


def _channel_constraints(n: int, k: int, dt: float, c: int, limits: Limits):
    """Rows ``A y <= b`` for one channel's knot vector of length ``n``."""
    D1 = np.diff(np.eye(n), axis=0) / dt
    D2 = np.diff(np.eye(n), n=2, axis=0) / dt**2
    S = np.eye(n)[:k]
    E = np.eye(n)[-k:]
    vm, am, eps = limits.v_max[c], limits.a_max[c], limits.eps[c]
    ys, ye = limits.y_start[c], limits.y_end[c]
    A = np.vstack([D1, -D1, D2, -D2, S, -S, E, -E])
    b = np.concatenate(
        [
            np.full(2 * len(D1), vm),
            np.full(2 * len(D2), am),
            np.full(k, ys + eps),
            np.full(k, eps - ys),
            np.full(k, ye + eps),
            np.full(k, eps - ye),
        ]
    )
    return A, b


def check_endpoints(n_knots: int, order: int, dt: float, limits: Limits) -> None:
    """Reject endpoint pairs that no knot sequence can join within ``v_max``."""
    steps = n_knots - 2 * order + 1
    reach = np.asarray(limits.v_max) * dt * max(steps, 0) + 2 * np.asarray(limits.eps)
    gap = np.abs(np.asarray(limits.y_end) - np.asarray(limits.y_start))
    bad = np.nonzero(gap > reach + 1e-12)[0]
    if bad.size:
        c = int(bad[0])
        raise InfeasibleProblemError(
            f"channel {c}: endpoint gap {gap[c]:.4g} exceeds reachable {reach[c]:.4g} "
            f"with v_max={limits.v_max[c]} over {steps} knot steps"
        )


def knot_bounds(n_knots: int, order: int, dt: float, limits: Limits) -> tuple[NDArray, NDArray]:
    """Per-knot boxes implied by the endpoint and velocity constraints, shape ``(n_knots, 4)``."""
    j = np.arange(n_knots)[:, None]
    from_start = np.maximum(j - order + 1, 0) * dt * np.asarray(limits.v_max)
    from_end = np.maximum(n_knots - order - j, 0) * dt * np.asarray(limits.v_max)
    eps = np.asarray(limits.eps)
    ys, ye = np.asarray(limits.y_start), np.asarray(limits.y_end)
    lo = np.maximum(ys - eps - from_start, ye - eps - from_end)
    hi = np.minimum(ys + eps + from_start, ye + eps + from_end)
    return lo, hi


def project_feasible(spline: UniformSpline, limits: Limits) -> UniformSpline:
    """Closest knot set (per channel, Euclidean) satisfying all constraints."""
    check_endpoints(spline.n_knots, spline.order, spline.dt_knot, limits)
    if constraint_violations(spline, limits).max_violation <= 0:
        return spline
    n, k, dt = spline.n_knots, spline.order, spline.dt_knot
    out = spline.knots.copy()
    for c in range(4):
        A, b = _channel_constraints(n, k, dt, c, limits)
        bt = b - _PROJ_MARGIN * np.maximum(1.0, np.abs(b))
        y0 = spline.knots[:, c]
        if np.all(A @ y0 <= b):
            continue
        res = minimize(
            lambda y: 0.5 * np.sum((y - y0) ** 2),
            y0,
            jac=lambda y: y - y0,
            method="SLSQP",
            constraints=[{"type": "ineq", "fun": lambda y: bt - A @ y, "jac": lambda y: -A}],
            options={"maxiter": 500, "ftol": 1e-14},
        )
        y = res.x
        if np.max(A @ y - b) > FEAS_TOL:
            raise InfeasibleProblemError(f"channel {c}: feasibility projection failed ({res.message})")
        out[:, c] = y
    return spline.with_knots(out)


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    cost: float
    max_violation: float


@dataclass
class OptimizeResult:
    spline: UniformSpline
    initial_cost: float
    final_cost: float
    log: list
    n_cost_evals: int
    diagnostics: dict = field(default_factory=dict)

    def log_csv(self) -> str:
        rows = ["iteration,cost,max_violation"]
        rows += [f"{r.iteration},{r.cost:.17g},{r.max_violation:.17g}" for r in self.log]
        return "\n".join(rows) + "\n"


@dataclass(frozen=True)
class SolverOptions:
    inner_iters: int = 15
    fd_step: float = 1e-4
    rho0: float = 10.0
    rho_growth: float = 5.0
    freeze_yaw: bool = False


def _fd_gradient(f_batch, x: NDArray, h: float, free: NDArray) -> NDArray:
    idx = np.nonzero(free)[0]
    P = np.zeros((2 * len(idx), x.size))
    P[np.arange(len(idx)), idx] = h
    P[len(idx) + np.arange(len(idx)), idx] = -h
    vals = f_batch(x[None, :] + P)
    g = np.zeros_like(x)
    g[idx] = (vals[: len(idx)] - vals[len(idx) :]) / (2 * h)
    return g


def solve(
    initial: UniformSpline,
    cost: CostSpec,
    limits: Limits,
    budget: int = 10,
    options: SolverOptions | None = None,
) -> OptimizeResult:
    """Augmented-Lagrangian knot optimization; ``budget`` counts outer iterations."""
    opts = options or SolverOptions()
    if budget < 0:
        raise ValueError("budget must be non-negative")
    start = project_feasible(initial, limits)
    shape = start.knots.shape
    n_evals = [0]

    def f_batch(X):
        X = np.atleast_2d(X)
        n_evals[0] += X.shape[0]
        return cost_batch(X.reshape((-1,) + shape), start, cost)

    x0 = start.knots.ravel().copy()
    J0 = float(f_batch(x0)[0])
    if not np.isfinite(J0):
        raise ValueError("cost of the initial spline is not finite")
    records = [IterationRecord(0, J0, constraint_violations(start, limits).max_violation)]
    best_x, best_J = x0, J0
    if budget == 0:
        return OptimizeResult(start, J0, J0, records, n_evals[0], _diagnostics(start, cost))

    free = np.ones(shape, dtype=bool)
    if opts.freeze_yaw:
        free[:, 3] = False
    free = free.ravel()
    scale = float(np.max(np.abs(_fd_gradient(f_batch, x0, opts.fd_step, free))))
    scale = scale if scale > 1e-12 else 1.0

    # stacked linear inequalities over the flattened (row-major) knot vector
    n, k, dt = shape[0], start.order, start.dt_knot
    blocks_A, blocks_b = [], []
    for c in range(4):
        A, b = _channel_constraints(n, k, dt, c, limits)
        Af = np.zeros((A.shape[0], n * 4))
        Af[:, c::4] = A
        blocks_A.append(Af)
        blocks_b.append(b)
    A = np.vstack(blocks_A)
    b = np.concatenate(blocks_b)
    # normalize rows so penalties act on comparable scales
    norms = np.linalg.norm(A, axis=1)
    A, b = A / norms[:, None], b / norms

    lo, hi = knot_bounds(n, k, dt, limits)
    bounds = list(zip(lo.ravel(), hi.ravel()))
    lam = np.zeros(len(b))
    rho = opts.rho0
    x = x0.copy()
    for it in range(1, budget + 1):

        def aug(xv, lam=lam, rho=rho):
            s = np.maximum(0.0, lam + rho * (A @ xv - b))
            fx = float(f_batch(xv)[0]) / scale
            L = fx + (np.sum(s**2) - np.sum(lam**2)) / (2 * rho)
            g = _fd_gradient(f_batch, xv, opts.fd_step, free) / scale + A.T @ s
            g[~free] = 0.0
            return L, g

        res = minimize(aug, x, jac=True, method="L-BFGS-B", bounds=bounds, options={"maxiter": opts.inner_iters})
        x = np.where(free, res.x, x0)
        viol = A @ x - b
        lam = np.maximum(0.0, lam + rho * viol)
        if np.max(viol) > 1e-3 * max(1.0, np.max(np.abs(b))):
            rho *= opts.rho_growth
        cand = project_feasible(start.with_knots(x.reshape(shape)), limits)
        Jc = float(f_batch(cand.knots.ravel())[0])
        if np.isfinite(Jc) and Jc <= best_J:
            best_x, best_J = cand.knots.ravel().copy(), Jc
            records.append(IterationRecord(it, Jc, constraint_violations(cand, limits).max_violation))
            x = best_x.copy()
        log.debug("outer %d: J=%.6g best=%.6g rho=%.3g", it, Jc, best_J, rho)
    out = start.with_knots(best_x.reshape(shape))
    return OptimizeResult(out, J0, best_J, records, n_evals[0], _diagnostics(out, cost))


def _diagnostics(spline: UniformSpline, cost: CostSpec) -> dict:
    if cost.kind == "mma":
        return {}
    windows = make_windows(spline, cost.H, cost.cam_dt, cost.imu_dt)
    M = e2log_matrices(spline.knots, spline, windows, cost.lie, cost.extrinsics or default_extrinsics(), cost.g)
    rep = rank_diagnostic(M)
    return {"e2log_rank": rep.rank, "unobservable_blocks": rep.unobservable_blocks()}


def optimize(
    initial: UniformSpline,
    cost: CostSpec,
    limits: Limits,
    budget: int = 10,
    options: SolverOptions | None = None,
) -> UniformSpline:
    return solve(initial, cost, limits, budget, options).spline


# ---------------------------------------------------------------------------
# random trajectories
# ---------------------------------------------------------------------------


class SamplingError(RuntimeError):
    pass


def random_spline(
    y_start,
    rng_seed: int,
    n_knots: int = 15,
    dt_knot: float = 0.5,
    limits: Limits | None = None,
    order: int = DEFAULT_ORDER,
    radius: float = 3.0,
    yaw_range: float = 1.0,
    wiggle: float = 0.4,
    max_tries: int = 1000,
) -> UniformSpline:
    """Feasible random spline from ``y_start`` to a uniform end point in a ball of ``radius``.

    The first and last ``order`` knots sit exactly on the endpoints; interior
    knots follow the straight line plus Gaussian wiggle. Rejection-sampled.
    """
    if n_knots < order:
        raise ValueError(f"n_knots must be >= order ({order})")
    y_start = np.asarray(y_start, dtype=float)
    base = limits or Limits()
    rng = np.random.default_rng(rng_seed)
    for _ in range(max_tries):
        d = rng.normal(size=3)
        d *= radius * rng.uniform() ** (1 / 3) / np.linalg.norm(d)
        y_end = y_start + np.append(d, rng.uniform(-yaw_range, yaw_range))
        lim = base.with_endpoints(y_start, y_end)
        s = np.clip((np.arange(n_knots) - (order - 1)) / max(n_knots - 2 * order + 1, 1), 0.0, 1.0)
        Y = y_start + s[:, None] * (y_end - y_start)
        interior = slice(order, n_knots - order)
        Y[interior] += rng.normal(scale=wiggle, size=Y[interior].shape)
        spl = UniformSpline(Y, order, dt_knot)
        if constraint_violations(spl, lim).max_violation <= 0:
            return spl
    raise SamplingError(f"no feasible random spline after {max_tries} tries")


def limits_for(spline: UniformSpline, base: Limits | None = None) -> Limits:
    """Limits whose endpoints are the spline's first and last knots."""
    base = base or Limits()
    return base.with_endpoints(spline.knots[0], spline.knots[-1])
