"""
Rigid-body model of an IMU carrying a camera (or other egomotion sensor).

Conventions
-----------
Quaternions are numpy arrays ``[w, x, y, z]`` (Hamilton, scalar first). All
quaternion helpers broadcast over leading axes, so an array of shape
``(..., 4)`` is a batch of quaternions.

Attitude errors are local (body-frame) perturbations, ``q = q_hat * Exp(dtheta)``.
The 21-dimensional error state is ordered as

    ===========  =======
    block        indices
    ===========  =======
    p_WI         0:3
    theta_WI     3:6
    v_W          6:9
    b_g          9:12
    b_a          12:15
    p_IC         15:18
    theta_IC     18:21
    ===========  =======

and the 12-dimensional process noise as ``(n_g, n_a, n_gw, n_aw)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from numpy.typing import NDArray

GRAVITY = np.array([0.0, 0.0, -9.81])

ERROR_DIM = 21
NOISE_DIM = 12
AMBIENT_DIM = 23

# error-state slices
P_WI = slice(0, 3)
TH_WI = slice(3, 6)
V_W = slice(6, 9)
B_G = slice(9, 12)
B_A = slice(12, 15)
P_IC = slice(15, 18)
TH_IC = slice(18, 21)

ERROR_BLOCKS = {
    "p_WI": P_WI,
    "theta_WI": TH_WI,
    "v_W": V_W,
    "b_g": B_G,
    "b_a": B_A,
    "p_IC": P_IC,
    "theta_IC": TH_IC,
}

Quaternion = NDArray[np.float64]
"""A unit quaternion ``[w, x, y, z]`` (Hamilton, scalar first)."""


# ---------------------------------------------------------------------------
# SO(3) / quaternion helpers
# ---------------------------------------------------------------------------


def skew(v: NDArray) -> NDArray:
    """Cross-product matrix, ``skew(a) @ b == cross(a, b)``."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def quat_identity() -> Quaternion:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q: NDArray) -> NDArray:
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_canonical(q: NDArray) -> NDArray:
    """Representative of ``{q, -q}`` with ``w >= 0``."""
    q = np.asarray(q, dtype=float)
    sign = np.where(q[..., :1] < 0.0, -1.0, 1.0)
    return q * sign


def quat_conjugate(q: NDArray) -> NDArray:
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_multiply(q1: NDArray, q2: NDArray) -> NDArray:
    """Hamilton product ``q1 * q2``.

    The result is renormalized when its norm drifts from one by more than 1e-9.
    """
    q1 = np.asarray(q1, dtype=float)
    q2 = np.asarray(q2, dtype=float)
    w1, x1, y1, z1 = np.moveaxis(q1, -1, 0)
    w2, x2, y2, z2 = np.moveaxis(q2, -1, 0)
    out = np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )
    norm = np.linalg.norm(out, axis=-1, keepdims=True)
    if np.any(np.abs(norm - 1.0) > 1e-9):
        out = out / norm
    return out


def quat_to_rotation(q: NDArray) -> NDArray:
    """Rotation matrix ``R(q)`` mapping vectors from the child to the parent frame."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    R[..., 0, 1] = 2.0 * (x * y - w * z)
    R[..., 0, 2] = 2.0 * (x * z + w * y)
    R[..., 1, 0] = 2.0 * (x * y + w * z)
    R[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    R[..., 1, 2] = 2.0 * (y * z - w * x)
    R[..., 2, 0] = 2.0 * (x * z - w * y)
    R[..., 2, 1] = 2.0 * (y * z + w * x)
    R[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return R


def rotation_to_quat(R: NDArray) -> NDArray:
    """Inverse of :func:`quat_to_rotation` (Shepperd's method), canonical ``w >= 0``."""
    R = np.asarray(R, dtype=float)
    m = lambda i, j: R[..., i, j]  # noqa: E731
    tr = m(0, 0) + m(1, 1) + m(2, 2)
    # four candidate solutions, each well-conditioned when its pivot is largest
    cands = np.stack(
        [
            np.stack([1.0 + tr, m(2, 1) - m(1, 2), m(0, 2) - m(2, 0), m(1, 0) - m(0, 1)], -1),
            np.stack([m(2, 1) - m(1, 2), 1.0 + m(0, 0) - m(1, 1) - m(2, 2), m(0, 1) + m(1, 0), m(0, 2) + m(2, 0)], -1),
            np.stack([m(0, 2) - m(2, 0), m(0, 1) + m(1, 0), 1.0 + m(1, 1) - m(0, 0) - m(2, 2), m(1, 2) + m(2, 1)], -1),
            np.stack([m(1, 0) - m(0, 1), m(0, 2) + m(2, 0), m(1, 2) + m(2, 1), 1.0 + m(2, 2) - m(0, 0) - m(1, 1)], -1),
        ],
        axis=-2,
    )
    pivot = np.argmax(np.stack([tr, m(0, 0), m(1, 1), m(2, 2)], -1), axis=-1)
    q = np.take_along_axis(cands, pivot[..., None, None], axis=-2)[..., 0, :]
    return quat_canonical(quat_normalize(q))


def quat_exp(theta: NDArray) -> NDArray:
    """Unit quaternion of the rotation vector ``theta``."""
    theta = np.asarray(theta, dtype=float)
    angle = np.linalg.norm(theta, axis=-1, keepdims=True)
    half = 0.5 * angle
    small = angle < 1e-8
    safe = np.where(small, 1.0, angle)
    # sin(a/2)/a -> 1/2 - a^2/48
    scale = np.where(small, 0.5 - angle**2 / 48.0, np.sin(half) / safe)
    return np.concatenate([np.cos(half), scale * theta], axis=-1)


def quat_log(q: NDArray) -> NDArray:
    """Rotation vector of ``q`` in ``(-pi, pi]`` (sign-canonicalized first)."""
    q = quat_canonical(q)
    w = q[..., :1]
    v = q[..., 1:]
    s = np.linalg.norm(v, axis=-1, keepdims=True)
    small = s < 1e-8
    safe = np.where(small, 1.0, s)
    # 2 atan2(s, w) / s -> 2/w (1 - s^2/(3 w^2))
    scale = np.where(small, 2.0 / w * (1.0 - s**2 / (3.0 * w**2)), 2.0 * np.arctan2(s, w) / safe)
    return scale * v


def rotation_angle(q: NDArray) -> NDArray:
    return np.linalg.norm(quat_log(q), axis=-1)


def omega_matrix(omega: NDArray) -> NDArray:
    """Quaternion kinematic matrix: ``q_dot = 0.5 * omega_matrix(w) @ q`` for body rate ``w``."""
    wx, wy, wz = np.asarray(omega, dtype=float)
    return np.array(
        [
            [0.0, -wx, -wy, -wz],
            [wx, 0.0, wz, -wy],
            [wy, -wz, 0.0, wx],
            [wz, wy, -wx, 0.0],
        ]
    )


# ---------------------------------------------------------------------------
# State types
# ---------------------------------------------------------------------------


def _vec3(v) -> NDArray:
    out = np.array(v, dtype=float).reshape(3)
    return out


@dataclass(frozen=True)
class VehicleState:
    p_WI: NDArray = field(default_factory=lambda: np.zeros(3))
    q_WI: Quaternion = field(default_factory=quat_identity)
    v_W: NDArray = field(default_factory=lambda: np.zeros(3))
    b_g: NDArray = field(default_factory=lambda: np.zeros(3))
    b_a: NDArray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "p_WI", _vec3(self.p_WI))
        object.__setattr__(self, "q_WI", quat_normalize(np.array(self.q_WI, dtype=float).reshape(4)))
        object.__setattr__(self, "v_W", _vec3(self.v_W))
        object.__setattr__(self, "b_g", _vec3(self.b_g))
        object.__setattr__(self, "b_a", _vec3(self.b_a))


@dataclass(frozen=True)
class ExtrinsicParams:
    p_IC: NDArray = field(default_factory=lambda: np.zeros(3))
    q_IC: Quaternion = field(default_factory=quat_identity)

    def __post_init__(self):
        object.__setattr__(self, "p_IC", _vec3(self.p_IC))
        object.__setattr__(self, "q_IC", quat_normalize(np.array(self.q_IC, dtype=float).reshape(4)))


@dataclass(frozen=True)
class AugmentedState:
    vehicle: VehicleState = field(default_factory=VehicleState)
    extrinsics: ExtrinsicParams = field(default_factory=ExtrinsicParams)

    def to_vector(self) -> NDArray:
        """Ambient 23-vector ``[p, q, v, b_g, b_a, p_IC, q_IC]``."""
        v, e = self.vehicle, self.extrinsics
        return np.concatenate([v.p_WI, v.q_WI, v.v_W, v.b_g, v.b_a, e.p_IC, e.q_IC])

    @classmethod
    def from_vector(cls, x: NDArray) -> "AugmentedState":
        x = np.asarray(x, dtype=float)
        return cls(
            VehicleState(x[0:3], x[3:7], x[7:10], x[10:13], x[13:16]),
            ExtrinsicParams(x[16:19], x[19:23]),
        )

    def with_vehicle(self, **kw) -> "AugmentedState":
        return replace(self, vehicle=replace(self.vehicle, **kw))

    def with_extrinsics(self, **kw) -> "AugmentedState":
        return replace(self, extrinsics=replace(self.extrinsics, **kw))


@dataclass(frozen=True)
class ImuSignal:
    omega_m: NDArray
    a_m: NDArray
    t: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "omega_m", _vec3(self.omega_m))
        object.__setattr__(self, "a_m", _vec3(self.a_m))


@dataclass(frozen=True)
class KinematicInput:
    omega_I: NDArray = field(default_factory=lambda: np.zeros(3))
    a_W: NDArray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "omega_I", _vec3(self.omega_I))
        object.__setattr__(self, "a_W", _vec3(self.a_W))


@dataclass(frozen=True)
class NoiseSpec:
    """Sensor noise levels.

    ``sigma_g``/``sigma_a`` are white-noise spectral densities (rad/s/sqrt(Hz),
    m/s^2/sqrt(Hz)); ``sigma_gw``/``sigma_aw`` drive the bias random walks.
    ``sigma_p``/``sigma_q`` are per-sample pose noise standard deviations.
    """

    sigma_g: float = 1.7e-4
    sigma_a: float = 2.0e-3
    sigma_gw: float = 2.0e-5
    sigma_aw: float = 3.0e-3
    sigma_p: float = 0.01
    sigma_q: float = np.deg2rad(0.2)
    gravity: tuple = (0.0, 0.0, -9.81)

    def __post_init__(self):
        for name in ("sigma_g", "sigma_a", "sigma_gw", "sigma_aw", "sigma_p", "sigma_q"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def g(self) -> NDArray:
        return np.array(self.gravity, dtype=float)

    def process_psd(self) -> NDArray:
        """12x12 continuous-time noise covariance in ``(n_g, n_a, n_gw, n_aw)`` order."""
        d = np.repeat([self.sigma_g, self.sigma_a, self.sigma_gw, self.sigma_aw], 3) ** 2
        return np.diag(d)

    def pose_cov(self) -> NDArray:
        return np.diag(np.repeat([self.sigma_p, self.sigma_q], 3) ** 2)


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


def kinematic_to_imu(s: AugmentedState, u: KinematicInput, g: NDArray = GRAVITY, t: float = 0.0) -> ImuSignal:
    """Noise-free IMU reading produced by true motion ``u`` at state ``s``."""
    return imu_measurement(s, u, g=g, t=t)


def imu_measurement(
    s: AugmentedState,
    u: KinematicInput,
    noise: tuple[NDArray, NDArray] | None = None,
    g: NDArray = GRAVITY,
    t: float = 0.0,
) -> ImuSignal:
    vs = s.vehicle
    R = quat_to_rotation(vs.q_WI)
    omega_m = u.omega_I + vs.b_g
    a_m = R.T @ (u.a_W - np.asarray(g)) + vs.b_a
    if noise is not None:
        omega_m = omega_m + noise[0]
        a_m = a_m + noise[1]
    return ImuSignal(omega_m, a_m, t)


def imu_to_kinematic(s: AugmentedState, m: ImuSignal, g: NDArray = GRAVITY) -> KinematicInput:
    vs = s.vehicle
    R = quat_to_rotation(vs.q_WI)
    return KinematicInput(m.omega_m - vs.b_g, R @ (m.a_m - vs.b_a) + np.asarray(g))


def continuous_dynamics(s: AugmentedState, u: KinematicInput) -> NDArray:
    """Noise-free time derivative of the ambient state vector (see :meth:`AugmentedState.to_vector`)."""
    vs = s.vehicle
    xdot = np.zeros(AMBIENT_DIM)
    xdot[0:3] = vs.v_W
    xdot[3:7] = 0.5 * omega_matrix(u.omega_I) @ vs.q_WI
    xdot[7:10] = u.a_W
    return xdot


def pose_measurement(s: AugmentedState) -> tuple[NDArray, Quaternion]:
    vs, ex = s.vehicle, s.extrinsics
    h1 = vs.p_WI + quat_to_rotation(vs.q_WI) @ ex.p_IC
    h2 = quat_multiply(vs.q_WI, ex.q_IC)
    return h1, h2


def pose_inverse(h1: NDArray, h2: Quaternion, extrinsics: ExtrinsicParams) -> tuple[NDArray, Quaternion]:
    """Recover ``(p_WI, q_WI)`` from a camera pose and known extrinsics."""
    q_WI = quat_multiply(h2, quat_conjugate(extrinsics.q_IC))
    p_WI = np.asarray(h1) - quat_to_rotation(q_WI) @ extrinsics.p_IC
    return p_WI, q_WI


def pose_residual(z_p: NDArray, z_q: Quaternion, s: AugmentedState) -> NDArray:
    """6-dim residual ``[z_p - h1; Log(z_q * h2^-1)]``."""
    h1, h2 = pose_measurement(s)
    return np.concatenate([np.asarray(z_p) - h1, quat_log(quat_multiply(z_q, quat_conjugate(h2)))])


def boxplus(s: AugmentedState, delta: NDArray) -> AugmentedState:
    """Apply a 21-dim error-state correction to ``s``."""
    delta = np.asarray(delta, dtype=float)
    v, e = s.vehicle, s.extrinsics
    return AugmentedState(
        VehicleState(
            v.p_WI + delta[P_WI],
            quat_multiply(v.q_WI, quat_exp(delta[TH_WI])),
            v.v_W + delta[V_W],
            v.b_g + delta[B_G],
            v.b_a + delta[B_A],
        ),
        ExtrinsicParams(e.p_IC + delta[P_IC], quat_multiply(e.q_IC, quat_exp(delta[TH_IC]))),
    )


def boxminus(s: AugmentedState, s_hat: AugmentedState) -> NDArray:
    """Error state ``delta`` such that ``boxplus(s_hat, delta) == s``."""
    v, vh = s.vehicle, s_hat.vehicle
    e, eh = s.extrinsics, s_hat.extrinsics
    return np.concatenate(
        [
            v.p_WI - vh.p_WI,
            quat_log(quat_multiply(quat_conjugate(vh.q_WI), v.q_WI)),
            v.v_W - vh.v_W,
            v.b_g - vh.b_g,
            v.b_a - vh.b_a,
            e.p_IC - eh.p_IC,
            quat_log(quat_multiply(quat_conjugate(eh.q_IC), e.q_IC)),
        ]
    )


class ErrorStateJacobians(NamedTuple):
    F: NDArray
    G: NDArray
    H: NDArray
    F_tilde: NDArray
    G_tilde: NDArray


def motion_jacobians(q_WI: NDArray, omega_hat: NDArray, a_hat: NDArray) -> tuple[NDArray, NDArray]:
    """Continuous error-state ``F`` and ``G``, batched over leading axes.

    ``omega_hat`` and ``a_hat`` are the bias-corrected IMU readings.
    """
    q_WI = np.asarray(q_WI, dtype=float)
    batch = q_WI.shape[:-1]
    R = quat_to_rotation(q_WI)
    eye = np.broadcast_to(np.eye(3), batch + (3, 3))
    F = np.zeros(batch + (ERROR_DIM, ERROR_DIM))
    F[..., P_WI, V_W] = eye
    F[..., TH_WI, TH_WI] = -skew(omega_hat)
    F[..., TH_WI, B_G] = -eye
    F[..., V_W, TH_WI] = -R @ skew(a_hat)
    F[..., V_W, B_A] = -R
    G = np.zeros(batch + (ERROR_DIM, NOISE_DIM))
    G[..., TH_WI, 0:3] = -eye
    G[..., V_W, 3:6] = -R
    G[..., B_G, 6:9] = eye
    G[..., B_A, 9:12] = eye
    return F, G


def pose_jacobian(q_WI: NDArray, p_IC: NDArray, q_IC: NDArray) -> NDArray:
    """6x21 Jacobian of the pose residual model, batched over leading axes."""
    q_WI = np.asarray(q_WI, dtype=float)
    batch = q_WI.shape[:-1]
    R = quat_to_rotation(q_WI)
    H = np.zeros(batch + (6, ERROR_DIM))
    H[..., 0:3, P_WI] = np.broadcast_to(np.eye(3), batch + (3, 3))
    H[..., 0:3, TH_WI] = -R @ skew(p_IC)
    H[..., 0:3, P_IC] = R
    H[..., 3:6, TH_WI] = R
    H[..., 3:6, TH_IC] = quat_to_rotation(quat_multiply(q_WI, q_IC))
    return H


def error_state_jacobians(s: AugmentedState, u: KinematicInput, dt: float, g: NDArray = GRAVITY) -> ErrorStateJacobians:
    if dt <= 0:
        raise ValueError("dt must be positive")
    m = imu_measurement(s, u, g=g)
    vs, ex = s.vehicle, s.extrinsics
    F, G = motion_jacobians(vs.q_WI, m.omega_m - vs.b_g, m.a_m - vs.b_a)
    H = pose_jacobian(vs.q_WI, ex.p_IC, ex.q_IC)
    return ErrorStateJacobians(F, G, H, np.eye(ERROR_DIM) + dt * F, np.sqrt(dt) * G)
