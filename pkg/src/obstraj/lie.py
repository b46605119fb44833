"""Lie derivatives of the pose measurement and the nonlinear observability matrix.

The model functions here are written component-wise so they run unchanged on
floats, numpy arrays (batched points) and jets. The IMU reading is the system
input and is held constant over the expansion, so

    L^0 = h(x),    L^i = dL^{i-1}/dx . f(x, u_m).

Gradients are taken with respect to the 21 error-state coordinates by seeding
:class:`~obstraj.jet.Grad` along the first-order retraction ``x_hat [+] delta``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from . import jet
from .jet import Dual, Grad
from .rigid_body import (
    AMBIENT_DIM,
    ERROR_BLOCKS,
    ERROR_DIM,
    GRAVITY,
    AugmentedState,
    ImuSignal,
    KinematicInput,
    imu_measurement,
    quat_multiply,
    skew,
)

MAX_ORDER_CAP = 4
MEAS_DIM = 6


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LieOrderConfig:
    max_order: int = 2
    fd_step: float = 1e-6

    def __post_init__(self):
        if not 0 <= self.max_order <= MAX_ORDER_CAP:
            raise ValueError(f"max_order must be in [0, {MAX_ORDER_CAP}], got {self.max_order}")


@dataclass(frozen=True)
class ObservabilityMatrix:
    rows: NDArray
    eval_point: AugmentedState
    eval_input: KinematicInput | ImuSignal
    order: int

    def block(self, i: int) -> NDArray:
        return self.rows[MEAS_DIM * i : MEAS_DIM * (i + 1)]


# ---------------------------------------------------------------------------
# component-wise model
# ---------------------------------------------------------------------------


def _qmul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return (
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    )


def _cross(a, b):
    return (
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    )


def _rotate(q, v):
    # R(q) v = v + 2 w (u x v) + 2 u x (u x v)
    w, u = q[0], q[1:]
    t = _cross(u, v)
    t = tuple(2.0 * c for c in t)
    ut = _cross(u, t)
    return tuple(v[i] + w * t[i] + ut[i] for i in range(3))


def _log(q):
    """Rotation vector of a near-identity quaternion (jet-safe at the identity)."""
    sign = np.where(np.asarray(jet.primal(q[0])) < 0.0, -1.0, 1.0)
    w = q[0] * sign
    v = tuple(c * sign for c in q[1:])
    n = v[0] * v[0] + v[1] * v[1] + v[2] * v[2]
    pn = np.asarray(jet.primal(n))
    if isinstance(n, (Dual, Grad)):
        if np.all(pn < 1e-3):
            scale = _log_series(n, w)
        else:
            s = jet.jsqrt(n)
            scale = 2.0 * jet.jatan(s / w) / s
    else:
        small = pn < 1e-3
        s = np.sqrt(np.where(small, 1.0, n))
        scale = np.where(small, _log_series(n, w), 2.0 * np.arctan2(s, w) / s)
    return tuple(scale * c for c in v)


def _log_series(n, w):
    # 2 atan(sqrt(n)/w)/sqrt(n) = (2/w) sum_k (-1)^k (n/w^2)^k / (2k+1)
    r = jet.reciprocal(w)
    x = n * r * r
    # Horner in x for 1 - x/3 + x^2/5 - x^3/7 + x^4/9 - x^5/11
    acc = -1.0 / 11.0
    for c in (1.0 / 9.0, -1.0 / 7.0, 1.0 / 5.0, -1.0 / 3.0, 1.0):
        acc = c + x * acc
    return 2.0 * r * acc


def _unpack(x):
    return x[0:3], x[3:7], x[7:10], x[10:13], x[13:16], x[16:19], x[19:23]


def ambient_dynamics(x, omega_m, a_m, g=GRAVITY):
    """IMU-driven, noise-free ``f(x, u_m)`` on the 23 ambient coordinates."""
    p, q, v, bg, ba, pic, qic = _unpack(x)
    w = tuple(omega_m[i] - bg[i] for i in range(3))
    qdot = _qmul(q, (0.0, w[0], w[1], w[2]))
    a_b = tuple(a_m[i] - ba[i] for i in range(3))
    ra = _rotate(q, a_b)
    vdot = tuple(ra[i] + g[i] for i in range(3))
    zero = 0.0
    return (
        tuple(v)
        + tuple(0.5 * c for c in qdot)
        + vdot
        + (zero,) * 6
        + (zero,) * 7
    )


def pose_model(x, q_ref):
    """``[h1; Log(h2 * q_ref^-1)]`` for the camera pose ``(h1, h2)``."""
    p, q, v, bg, ba, pic, qic = _unpack(x)
    rp = _rotate(q, pic)
    h1 = tuple(p[i] + rp[i] for i in range(3))
    h2 = _qmul(q, qic)
    qinv = (q_ref[0], -q_ref[1], -q_ref[2], -q_ref[3])
    return h1 + _log(_qmul(h2, qinv))


def _re(x, lvl):
    if isinstance(x, Dual) and x.level == lvl:
        return x.re
    return x


def _lie_all(r, x, omega_m, a_m, g, q_ref, lvl=1):
    """``[L^0, ..., L^r]`` at ``x`` (each a 6-tuple of the same jet type as ``x``)."""
    if r == 0:
        return [pose_model(x, q_ref)]
    fx = ambient_dynamics(x, omega_m, a_m, g)
    xd = [Dual(xi, fi, lvl) for xi, fi in zip(x, fx)]
    inner = _lie_all(r - 1, xd, omega_m, a_m, g, q_ref, lvl + 1)
    out = [tuple(_re(c, lvl) for c in inner[0])]
    for block in inner:
        out.append(tuple(jet.tangent(c, lvl) for c in block))
    return out


# ---------------------------------------------------------------------------
# batched evaluation
# ---------------------------------------------------------------------------


def _seeded_state(x_hat: NDArray):
    """Ambient components of ``x_hat [+] delta`` as ``Grad`` jets in ``delta``."""
    B = x_hat.shape[0]
    n = ERROR_DIM
    comps = []

    def lin(col, err_idx):
        g = np.zeros((B, n))
        g[:, err_idx] = 1.0
        return Grad(x_hat[:, col], g)

    def quat(cols, err0):
        qh = x_hat[:, cols]
        qw, qv = qh[:, 0], qh[:, 1:]
        out = []
        g = np.zeros((B, n))
        g[:, err0 : err0 + 3] = -0.5 * qv
        out.append(Grad(qw, g))
        # 0.5 (qw I + [qv]x) columns
        M = 0.5 * (qw[:, None, None] * np.eye(3) + skew(qv))
        for i in range(3):
            g = np.zeros((B, n))
            g[:, err0 : err0 + 3] = M[:, i, :]
            out.append(Grad(qh[:, 1 + i], g))
        return out

    for i in range(3):
        comps.append(lin(i, 0 + i))
    comps += quat(slice(3, 7), 3)
    for i in range(3):
        comps.append(lin(7 + i, 6 + i))
    for i in range(3):
        comps.append(lin(10 + i, 9 + i))
    for i in range(3):
        comps.append(lin(13 + i, 12 + i))
    for i in range(3):
        comps.append(lin(16 + i, 15 + i))
    comps += quat(slice(19, 23), 18)
    return comps


def _as_batch(x, omega_m, a_m):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    omega_m = np.broadcast_to(np.asarray(omega_m, dtype=float), (x.shape[0], 3))
    a_m = np.broadcast_to(np.asarray(a_m, dtype=float), (x.shape[0], 3))
    return x, omega_m, a_m


def _default_ref(x):
    return quat_multiply(x[:, 3:7], x[:, 19:23])


def lie_values_batch(x, omega_m, a_m, order: int, g=GRAVITY, q_ref=None) -> NDArray:
    """Values ``L^0..L^order`` at ambient points ``x`` (B, 23); returns (B, order+1, 6)."""
    x, omega_m, a_m = _as_batch(x, omega_m, a_m)
    if q_ref is None:
        q_ref = _default_ref(x)
    q_ref = np.broadcast_to(np.asarray(q_ref, dtype=float), (x.shape[0], 4))
    B = x.shape[0]
    comps = [x[:, j] for j in range(AMBIENT_DIM)]
    L = _lie_all(order, comps, omega_m.T, a_m.T, tuple(np.asarray(g, dtype=float)), q_ref.T)
    return np.stack([np.stack([jet.value(c, (B,)) for c in blk], axis=-1) for blk in L], axis=1)


def lie_gradients_batch(x, omega_m, a_m, order: int, g=GRAVITY) -> NDArray:
    """Gradients of ``L^0..L^order`` w.r.t. the error state; returns (B, order+1, 6, 21).

    The attitude residual is referenced to the predicted camera attitude at each point.
    """
    if not 0 <= order <= MAX_ORDER_CAP:
        raise ValueError(f"order must be in [0, {MAX_ORDER_CAP}]")
    x, omega_m, a_m = _as_batch(x, omega_m, a_m)
    B = x.shape[0]
    q_ref = _default_ref(x)
    comps = _seeded_state(x)
    L = _lie_all(order, comps, omega_m.T, a_m.T, tuple(np.asarray(g, dtype=float)), q_ref.T)
    out = np.empty((B, order + 1, MEAS_DIM, ERROR_DIM))
    for i, blk in enumerate(L):
        for k, c in enumerate(blk):
            out[:, i, k, :] = jet.gradient(c, (B,), ERROR_DIM)
    return out


def observability_batch(x, omega_m, a_m, order: int, g=GRAVITY) -> NDArray:
    """Stacked observability matrices, shape (B, (order+1)*6, 21)."""
    grads = lie_gradients_batch(x, omega_m, a_m, order, g)
    B = grads.shape[0]
    return grads.reshape(B, (order + 1) * MEAS_DIM, ERROR_DIM)


# ---------------------------------------------------------------------------
# single-point API
# ---------------------------------------------------------------------------


def _imu_input(s: AugmentedState, u, g) -> ImuSignal:
    if isinstance(u, ImuSignal):
        return u
    return imu_measurement(s, u, g=g)


def _check_order(i: int, cfg: LieOrderConfig):
    if i < 0 or i > cfg.max_order:
        raise ValueError(f"Lie order {i} outside configured range 0..{cfg.max_order}")


def lie_derivative(
    i: int,
    s: AugmentedState,
    u: KinematicInput | ImuSignal,
    cfg: LieOrderConfig | None = None,
    g=GRAVITY,
    q_ref=None,
) -> NDArray:
    """``L^i`` at ``s``.

    ``u`` may be the true motion (converted to the IMU reading at ``s``) or an
    IMU reading used as-is. ``q_ref`` fixes the attitude-residual reference;
    by default it is the predicted camera attitude at ``s``.
    """
    cfg = cfg or LieOrderConfig(max_order=MAX_ORDER_CAP)
    _check_order(i, cfg)
    m = _imu_input(s, u, g)
    x = s.to_vector()[None]
    vals = lie_values_batch(x, m.omega_m, m.a_m, i, g=g, q_ref=q_ref)
    return vals[0, i]


def _check_finite(G: NDArray, order_offset: int = 0):
    if np.all(np.isfinite(G)):
        return
    for i in range(G.shape[0]):
        for name, sl in ERROR_BLOCKS.items():
            if not np.all(np.isfinite(G[i, :, sl])):
                raise NonFiniteGradientError(
                    f"non-finite gradient of Lie derivative order {i + order_offset} in block {name}"
                )


def lie_gradient(
    i: int,
    s: AugmentedState,
    u: KinematicInput | ImuSignal,
    cfg: LieOrderConfig | None = None,
    g=GRAVITY,
) -> NDArray:
    """6x21 gradient of ``L^i`` in error-state coordinates at ``s``."""
    cfg = cfg or LieOrderConfig(max_order=MAX_ORDER_CAP)
    _check_order(i, cfg)
    m = _imu_input(s, u, g)
    grads = lie_gradients_batch(s.to_vector()[None], m.omega_m, m.a_m, i, g=g)[0]
    _check_finite(grads)
    return grads[i]


def observability_matrix(
    s: AugmentedState,
    u: KinematicInput | ImuSignal,
    cfg: LieOrderConfig | None = None,
    g=GRAVITY,
) -> ObservabilityMatrix:
    cfg = cfg or LieOrderConfig()
    m = _imu_input(s, u, g)
    grads = lie_gradients_batch(s.to_vector()[None], m.omega_m, m.a_m, cfg.max_order, g=g)[0]
    _check_finite(grads)
    rows = grads.reshape(-1, ERROR_DIM)
    return ObservabilityMatrix(rows, s, u, cfg.max_order)


@dataclass(frozen=True)
class RankReport:
    rank: int
    singular_values: NDArray
    null_space: NDArray  # columns span the numerically unobservable directions

    def unobservable_blocks(self, tol: float = 1e-6) -> list[str]:
        """Error-state blocks that have a component in the null space."""
        if self.null_space.shape[1] == 0:
            return []
        out = []
        for name, sl in ERROR_BLOCKS.items():
            if np.linalg.norm(self.null_space[sl], ord=2) > tol:
                out.append(name)
        return out

    def null_rank_in(self, sl: slice, tol: float = 1e-6) -> int:
        """Rank of the null-space basis restricted to the coordinates ``sl``."""
        if self.null_space.shape[1] == 0:
            return 0
        sv = np.linalg.svd(self.null_space[sl], compute_uv=False)
        return int(np.sum(sv > tol))


def rank_diagnostic(O, threshold: float = 1e-8) -> RankReport:
    """Numerical rank (``sigma_i > threshold * sigma_max``) and null-space basis."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    M = O.rows if isinstance(O, ObservabilityMatrix) else np.asarray(O, dtype=float)
    n = M.shape[1]
    _, sv, Vt = np.linalg.svd(M, full_matrices=True)
    smax = sv[0] if sv.size else 0.0
    if smax == 0.0:
        return RankReport(0, sv, np.eye(n))
    rank = int(np.sum(sv > threshold * smax))
    return RankReport(rank, sv, Vt[rank:].T)
