"""Observability metrics over a trajectory.

Two accumulators are built window by window:

* deterministic (E2LOG): ``A = sum_n O_n^T W1 O_n`` where ``W1`` integrates the
  truncated Taylor expansion of the measurement Jacobian over ``[0, H]``;
* stochastic (interval information filter): a 33x33 information matrix over the
  error state and the process noise injected at each window start, propagated
  with the window's state-transition product.

Costs are returned in minimization form (larger information -> more negative).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from numpy.typing import NDArray

from .lie import MEAS_DIM, LieOrderConfig, ObservabilityMatrix, observability_batch
from .rigid_body import (
    ERROR_DIM,
    GRAVITY,
    NOISE_DIM,
    P_IC,
    ExtrinsicParams,
    motion_jacobians,
    quat_exp,
    quat_to_rotation,
    skew,
)
from .spline import SplineDomainError, UniformSpline, evaluate, flat_to_kinematics

JOINT_DIM = ERROR_DIM + NOISE_DIM
DEFAULT_CAM_DT = 0.1
DEFAULT_IMU_DT = 1.0 / 200.0
SINGULAR_COND = 1e12


class SingularTransitionError(np.linalg.LinAlgError):
    pass


def default_extrinsics() -> ExtrinsicParams:
    return ExtrinsicParams([0.1, 0.02, -0.03], quat_exp([0.0, np.deg2rad(5.0), 0.0]))


def default_P0() -> NDArray:
    deg5 = np.deg2rad(5.0)
    sig = np.concatenate(
        [
            np.full(3, 0.1),  # position
            np.full(3, deg5),  # attitude
            np.full(3, 0.1),  # velocity
            np.full(6, 0.01),  # biases
            np.full(3, 0.05),  # extrinsic translation
            np.full(3, deg5),  # extrinsic rotation
        ]
    )
    return np.diag(sig**2)


@dataclass(frozen=True)
class WindowSpec:
    t_start: float
    H: float
    meas_times: tuple = (0.0, 0.1)
    imu_dt: float = DEFAULT_IMU_DT

    def __post_init__(self):
        if not self.H > 0:
            raise ValueError("window length H must be positive")
        mt = tuple(float(t) for t in self.meas_times)
        if any(b <= a for a, b in zip(mt, mt[1:])):
            raise ValueError("meas_times must be strictly increasing")
        if mt and (mt[0] < 0 or mt[-1] >= self.H):
            raise ValueError("meas_times must lie in [0, H)")
        object.__setattr__(self, "meas_times", mt)
        if not self.imu_dt > 0:
            raise ValueError("imu_dt must be positive")

    @property
    def n_imu_steps(self) -> int:
        n = self.H / self.imu_dt
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ValueError(f"imu_dt {self.imu_dt} does not divide H {self.H}")
        return int(round(n))


def make_windows(
    spline: UniformSpline,
    H: float = 0.2,
    cam_dt: float = DEFAULT_CAM_DT,
    imu_dt: float = DEFAULT_IMU_DT,
) -> list[WindowSpec]:
    """Consecutive windows of length ``H`` tiling the spline's span from its start."""
    ratio = H / cam_dt
    if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
        raise ValueError("H must be a positive multiple of the camera period")
    meas = tuple(k * cam_dt for k in range(int(round(ratio))))
    n = int(math.floor(spline.span / H + 1e-9))
    return [WindowSpec(spline.t_start + i * H, H, meas, imu_dt) for i in range(n)]


@dataclass(frozen=True)
class SelectionSpec:
    indices: tuple = tuple(range(P_IC.start, P_IC.stop))

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if not idx:
            raise ValueError("selection must be non-empty")
        if min(idx) < 0 or max(idx) >= ERROR_DIM:
            raise ValueError(f"selection indices must lie in [0, {ERROR_DIM})")
        object.__setattr__(self, "indices", idx)

    def matrix(self, dim: int = ERROR_DIM) -> NDArray:
        S = np.zeros((dim, dim))
        S[self.indices, self.indices] = 1.0
        return S


@dataclass
class MetricAccumulator:
    kind: Literal["deterministic", "stochastic"]
    matrix: NDArray
    window_count: int = 0
    log: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# weights and single-window algebra
# ---------------------------------------------------------------------------


def weight_w1(H: float, r: int) -> NDArray:
    if not H > 0:
        raise ValueError("H must be positive")
    W = np.zeros(((r + 1) * MEAS_DIM, (r + 1) * MEAS_DIM))
    I6 = np.eye(MEAS_DIM)
    for i in range(r + 1):
        for j in range(r + 1):
            p = i + j + 1
            W[6 * i : 6 * i + 6, 6 * j : 6 * j + 6] = H**p / (p * math.factorial(i) * math.factorial(j)) * I6
    return W


def weight_w2(meas_times: Sequence[float], r: int) -> NDArray:
    t = np.asarray(meas_times, dtype=float)
    if np.any(t < 0):
        raise ValueError("measurement times must be non-negative")
    W = np.zeros(((r + 1) * MEAS_DIM, (r + 1) * MEAS_DIM))
    I6 = np.eye(MEAS_DIM)
    for i in range(r + 1):
        for j in range(r + 1):
            # numpy defines 0.0**0 == 1.0
            s = float(np.sum(t ** (i + j)))
            W[6 * i : 6 * i + 6, 6 * j : 6 * j + 6] = s / (math.factorial(i) * math.factorial(j)) * I6
    return W


def _rows(O) -> NDArray:
    return O.rows if isinstance(O, ObservabilityMatrix) else np.asarray(O, dtype=float)


def _order_of(rows: NDArray) -> int:
    m = rows.shape[-2]
    if m % MEAS_DIM:
        raise ValueError("observability matrix rows must be a multiple of 6")
    return m // MEAS_DIM - 1


def _sym(A: NDArray) -> NDArray:
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def e2log_window(O, H: float) -> NDArray:
    rows = _rows(O)
    W1 = weight_w1(H, _order_of(rows))
    return _sym(np.swapaxes(rows, -1, -2) @ W1 @ rows)


def noise_injection(Phi: NDArray, G: NDArray, H: float) -> NDArray:
    """``E_n = [I | sqrt(H) Phi G]`` (21 x 33)."""
    Phi = np.asarray(Phi, dtype=float)
    G = np.asarray(G, dtype=float)
    if Phi.shape[-2:] != (ERROR_DIM, ERROR_DIM) or G.shape[-2:] != (ERROR_DIM, NOISE_DIM):
        raise ValueError("Phi must be 21x21 and G 21x12")
    noise = np.sqrt(H) * (Phi @ G)
    eye = np.broadcast_to(np.eye(ERROR_DIM), noise.shape[:-1] + (ERROR_DIM,))
    return np.concatenate([eye, noise], axis=-1)


def stochastic_window(O, E: NDArray, W2: NDArray) -> NDArray:
    rows = _rows(O)
    L = rows @ E
    return _sym(np.swapaxes(L, -1, -2) @ W2 @ L)


def _cond1(Phi: NDArray, Phi_inv: NDArray) -> NDArray:
    return np.linalg.norm(Phi, ord=1, axis=(-2, -1)) * np.linalg.norm(Phi_inv, ord=1, axis=(-2, -1))


def _invert_transition(Phi: NDArray) -> NDArray:
    try:
        inv = np.linalg.inv(Phi)
    except np.linalg.LinAlgError:
        raise SingularTransitionError("state-transition product is singular (condition number inf)") from None
    cond = _cond1(Phi, inv)
    if not np.all(np.isfinite(cond)) or np.any(cond > SINGULAR_COND):
        raise SingularTransitionError(f"state-transition product is ill-conditioned (1-norm condition {np.max(cond):.3e})")
    return inv


def _extend(Phi_inv: NDArray) -> NDArray:
    batch = Phi_inv.shape[:-2]
    out = np.zeros(batch + (JOINT_DIM, JOINT_DIM))
    out[..., :ERROR_DIM, :ERROR_DIM] = Phi_inv
    out[..., ERROR_DIM:, ERROR_DIM:] = np.eye(NOISE_DIM)
    return out


def stochastic_propagate(B: NDArray, B_tilde: NDArray, Phi: NDArray) -> NDArray:
    """``Phi_ext^-T (B + B_tilde) Phi_ext^-1`` with ``Phi_ext = blockdiag(Phi, I_12)``."""
    Pinv = _extend(_invert_transition(np.asarray(Phi, dtype=float)))
    return _sym(np.swapaxes(Pinv, -1, -2) @ (B + B_tilde) @ Pinv)


def initial_information(P0: NDArray) -> NDArray:
    P0 = np.asarray(P0, dtype=float)
    if not np.allclose(P0, P0.T) or np.linalg.eigvalsh(P0)[0] <= 0:
        raise ValueError("P0 must be symmetric positive definite")
    B = np.zeros((JOINT_DIM, JOINT_DIM))
    B[:ERROR_DIM, :ERROR_DIM] = np.linalg.inv(P0)
    B[ERROR_DIM:, ERROR_DIM:] = np.eye(NOISE_DIM)
    return _sym(B)


# ---------------------------------------------------------------------------
# trajectory evaluation (batched over knot sets)
# ---------------------------------------------------------------------------


def _ambient(kin, extrinsics: ExtrinsicParams) -> NDArray:
    shape = kin.p.shape[:-1]
    x = np.zeros(shape + (23,))
    x[..., 0:3] = kin.p
    x[..., 3:7] = kin.q
    x[..., 7:10] = kin.v
    x[..., 16:19] = extrinsics.p_IC
    x[..., 19:23] = extrinsics.q_IC
    return x


def _kinematics(knots, spline: UniformSpline, t, g):
    derivs = [evaluate(knots, spline.order, spline.dt_knot, spline.t0, t, d) for d in range(4)]
    return flat_to_kinematics(*derivs, g=g)


def _imu(kin, g):
    R = quat_to_rotation(kin.q)
    a_m = np.einsum("...ji,...j->...i", R, kin.a - np.asarray(g))
    return kin.omega, a_m


def _check_windows(spline: UniformSpline, windows: Sequence[WindowSpec]):
    tol = 1e-9
    for w in windows:
        if w.t_start < spline.t_start - tol or w.t_start + w.H > spline.t_end + tol:
            raise SplineDomainError(
                f"window [{w.t_start}, {w.t_start + w.H}] outside spline span [{spline.t_start}, {spline.t_end}]"
            )


def window_observability(knots, spline: UniformSpline, windows, cfg: LieOrderConfig, extrinsics, g=GRAVITY):
    """Observability matrices at each window start: shape batch + (W, 6(r+1), 21)."""
    knots = np.asarray(knots, dtype=float)
    t = np.array([w.t_start for w in windows])
    kin = _kinematics(knots, spline, t, g)
    x = _ambient(kin, extrinsics)
    om, am = _imu(kin, g)
    batch = x.shape[:-1]
    O = observability_batch(x.reshape(-1, 23), om.reshape(-1, 3), am.reshape(-1, 3), cfg.max_order, g)
    return O.reshape(batch + O.shape[1:])


def window_transitions(knots, spline: UniformSpline, windows, g=GRAVITY):
    """``(Phi, G)`` per window: products of ``I + dt F_k`` over the window and ``G`` at its start.

    Only the position, attitude and velocity rows of the product evolve (bias and
    extrinsic rows stay identity), so those three 3x15 row blocks are propagated.
    """
    knots = np.asarray(knots, dtype=float)
    K = windows[0].n_imu_steps
    dt = windows[0].imu_dt
    if any(w.n_imu_steps != K or w.imu_dt != dt for w in windows):
        raise ValueError("all windows must share H and imu_dt")
    starts = np.array([w.t_start for w in windows])
    t = np.minimum(starts[None, :] + dt * np.arange(K)[:, None], spline.t_end)  # (K, W)
    kin = _kinematics(knots, spline, t, g)
    om, am = _imu(kin, g)
    R = quat_to_rotation(kin.q)
    Ra = R @ skew(am)  # batch + (K, W, 3, 3)
    Wx = skew(om)
    batch = knots.shape[:-2] + (len(windows),)
    n = 15
    rows_p = np.zeros(batch + (3, n))
    rows_t = np.zeros(batch + (3, n))
    rows_v = np.zeros(batch + (3, n))
    rows_p[..., :, 0:3] = np.eye(3)
    rows_t[..., :, 3:6] = np.eye(3)
    rows_v[..., :, 6:9] = np.eye(3)
    for k in range(K):
        Wk = Wx[..., k, :, :, :]
        Rk = R[..., k, :, :, :]
        new_t = rows_t - dt * (Wk @ rows_t)
        new_t[..., :, 9:12] -= dt * np.eye(3)
        new_v = rows_v - dt * (Ra[..., k, :, :, :] @ rows_t)
        new_v[..., :, 12:15] -= dt * Rk
        rows_p = rows_p + dt * rows_v
        rows_t, rows_v = new_t, new_v
    Phi = np.broadcast_to(np.eye(ERROR_DIM), batch + (ERROR_DIM, ERROR_DIM)).copy()
    Phi[..., 0:3, 0:n] = rows_p
    Phi[..., 3:6, 0:n] = rows_t
    Phi[..., 6:9, 0:n] = rows_v
    _, G0 = motion_jacobians(kin.q[..., 0, :, :], om[..., 0, :, :], am[..., 0, :, :])
    return Phi, G0


def e2log_matrices(knots, spline: UniformSpline, windows, cfg: LieOrderConfig, extrinsics, g=GRAVITY) -> NDArray:
    """Deterministic accumulator for one or many knot sets; shape batch + (21, 21)."""
    if not windows:
        knots = np.asarray(knots)
        return np.zeros(knots.shape[:-2] + (ERROR_DIM, ERROR_DIM))
    O = window_observability(knots, spline, windows, cfg, extrinsics, g)
    H = windows[0].H
    if any(w.H != H for w in windows):
        raise ValueError("all windows must share H")
    return e2log_window(O, H).sum(axis=-3)


def stochastic_matrices(knots, spline: UniformSpline, windows, P0, cfg: LieOrderConfig, extrinsics, g=GRAVITY):
    """Stochastic accumulator ``B_Xi`` for one or many knot sets; shape batch + (33, 33)."""
    knots = np.asarray(knots, dtype=float)
    batch = knots.shape[:-2]
    B = np.broadcast_to(initial_information(P0), batch + (JOINT_DIM, JOINT_DIM)).copy()
    if not windows:
        return B
    O = window_observability(knots, spline, windows, cfg, extrinsics, g)
    Phi, G = window_transitions(knots, spline, windows, g)
    W2 = weight_w2(windows[0].meas_times, cfg.max_order)
    E = noise_injection(Phi, G, windows[0].H)
    Bt = stochastic_window(O, E, W2)
    Pinv = _extend(_invert_transition(Phi))
    PinvT = np.swapaxes(Pinv, -1, -2)
    for n in range(len(windows)):
        B = _sym(PinvT[..., n, :, :] @ (B + Bt[..., n, :, :]) @ Pinv[..., n, :, :])
    return B


def e2log_trajectory(
    traj: UniformSpline,
    windows: Sequence[WindowSpec],
    cfg: LieOrderConfig | None = None,
    extrinsics: ExtrinsicParams | None = None,
    g=GRAVITY,
) -> MetricAccumulator:
    cfg = cfg or LieOrderConfig()
    _check_windows(traj, windows)
    A = e2log_matrices(traj.knots, traj, list(windows), cfg, extrinsics or default_extrinsics(), g)
    return MetricAccumulator("deterministic", A, len(windows))


def state_transition_product(traj: UniformSpline, window: WindowSpec, g=GRAVITY) -> NDArray:
    _check_windows(traj, [window])
    Phi, _ = window_transitions(traj.knots, traj, [window], g)
    return Phi[0]


def stochastic_trajectory(
    traj: UniformSpline,
    windows: Sequence[WindowSpec],
    P0: NDArray | None = None,
    cfg: LieOrderConfig | None = None,
    extrinsics: ExtrinsicParams | None = None,
    g=GRAVITY,
) -> MetricAccumulator:
    cfg = cfg or LieOrderConfig()
    _check_windows(traj, windows)
    P0 = default_P0() if P0 is None else P0
    B = stochastic_matrices(traj.knots, traj, list(windows), P0, cfg, extrinsics or default_extrinsics(), g)
    return MetricAccumulator("stochastic", B, len(windows))


# ---------------------------------------------------------------------------
# scalarization
# ---------------------------------------------------------------------------

ScalarMode = Literal["trace", "min_singular_value", "condition_number"]


def scalarize_matrix(M: NDArray, sel: SelectionSpec, mode: ScalarMode = "trace") -> NDArray:
    """Batched scalarization of the error-state block of ``M``."""
    idx = np.array(sel.indices)
    sub = np.asarray(M)[..., idx[:, None], idx[None, :]]
    if mode == "trace":
        return -np.trace(sub, axis1=-2, axis2=-1)
    sv = np.linalg.svd(sub, compute_uv=False)
    if mode == "min_singular_value":
        return -sv[..., -1]
    if mode == "condition_number":
        with np.errstate(divide="ignore"):
            return np.where(sv[..., -1] > 0, sv[..., 0] / np.where(sv[..., -1] > 0, sv[..., -1], 1.0), np.inf)
    raise ValueError(f"unknown scalarization mode {mode!r}")


def scalarize(acc: MetricAccumulator | NDArray, sel: SelectionSpec | None = None, mode: ScalarMode = "trace") -> float:
    """Minimization cost of an accumulator (trace and min-sigma are negated)."""
    sel = sel or SelectionSpec()
    M = acc.matrix if isinstance(acc, MetricAccumulator) else np.asarray(acc)
    if max(sel.indices) >= ERROR_DIM:
        raise ValueError("selection must index the error-state block")
    value = float(scalarize_matrix(M, sel, mode))
    if mode == "condition_number" and not np.isfinite(value):
        import warnings

        warnings.warn("selected block is singular; condition number reported as inf", RuntimeWarning, stacklevel=2)
    return value
