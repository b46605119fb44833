"""Sensor simulation along a flat trajectory and an error-state EKF for extrinsic calibration.

The trajectory is executed perfectly: true states come from the flatness map.
Landmark count enters only through the pose-noise scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.stats import chi2

from .rigid_body import (
    B_A,
    B_G,
    ERROR_DIM,
    P_IC,
    P_WI,
    TH_IC,
    TH_WI,
    V_W,
    AugmentedState,
    ExtrinsicParams,
    NoiseSpec,
    VehicleState,
    motion_jacobians,
    pose_jacobian,
    quat_conjugate,
    quat_exp,
    quat_log,
    quat_multiply,
    quat_normalize,
    quat_to_rotation,
    skew,
)
from .spline import FlatnessSingularityError, UniformSpline, spline_kinematics

EXT = slice(P_IC.start, TH_IC.stop)
_PD_TOL = -1e-9
MIN_POSE_SIGMA = 1e-4


class FilterDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class SensorRates:
    imu_hz: int = 200
    cam_hz: int = 10

    def __post_init__(self):
        if self.imu_hz <= 0 or self.cam_hz <= 0:
            raise ValueError("rates must be positive")
        if self.imu_hz % self.cam_hz:
            raise ValueError("imu_hz must be a multiple of cam_hz")

    @property
    def ratio(self) -> int:
        return self.imu_hz // self.cam_hz


@dataclass(frozen=True)
class QualityLevel:
    n_landmarks: int = 400

    def __post_init__(self):
        if int(self.n_landmarks) != self.n_landmarks or self.n_landmarks < 1:
            raise ValueError("n_landmarks must be a positive integer")


def pose_noise_scale(quality: QualityLevel, base_sigma_p: float, base_sigma_q: float) -> tuple[float, float]:
    """Pose noise for a landmark count, anchored so 400 landmarks gives the base sigmas."""
    f = np.sqrt(400.0 / quality.n_landmarks)
    return base_sigma_p * f, base_sigma_q * f


@dataclass(frozen=True)
class ImuStream:
    t: NDArray
    omega_m: NDArray
    a_m: NDArray
    truth: NDArray  # ambient 23-vectors (with biases) at each sample


@dataclass(frozen=True)
class PoseStream:
    t: NDArray
    p: NDArray
    q: NDArray
    imu_index: NDArray  # IMU sample index of each pose
    sigma_p: float
    sigma_q: float


def simulate_run(
    traj: UniformSpline,
    truth: ExtrinsicParams,
    noise: NoiseSpec,
    rates: SensorRates = SensorRates(),
    quality: QualityLevel = QualityLevel(),
    seed: int = 0,
    initial_bias: tuple[NDArray, NDArray] | None = None,
) -> tuple[ImuStream, PoseStream]:
    """Noisy IMU and pose measurements along ``traj``."""
    if traj.span < 1.0:
        raise ValueError(f"trajectory span {traj.span:.3f} s is shorter than 1 s")
    rng = np.random.default_rng(seed)
    dt = 1.0 / rates.imu_hz
    K = int(np.floor(traj.span * rates.imu_hz + 1e-9))
    t = traj.t_start + dt * np.arange(K + 1)
    try:
        kin = spline_kinematics(traj.knots, traj.order, traj.dt_knot, traj.t0, t, noise.g)
    except FlatnessSingularityError as exc:
        c = np.linalg.norm(traj.eval(t, 2)[:, :3] - noise.g, axis=-1)
        raise FlatnessSingularityError(f"{exc} near t = {t[np.argmin(c)]:.4f} s") from None

    bg0, ba0 = (np.zeros(3), np.zeros(3)) if initial_bias is None else map(np.asarray, initial_bias)
    steps_g = rng.normal(size=(K, 3)) * noise.sigma_gw * np.sqrt(dt)
    steps_a = rng.normal(size=(K, 3)) * noise.sigma_aw * np.sqrt(dt)
    b_g = bg0 + np.vstack([np.zeros(3), np.cumsum(steps_g, axis=0)])
    b_a = ba0 + np.vstack([np.zeros(3), np.cumsum(steps_a, axis=0)])
    n_g = rng.normal(size=(K + 1, 3)) * noise.sigma_g / np.sqrt(dt)
    n_a = rng.normal(size=(K + 1, 3)) * noise.sigma_a / np.sqrt(dt)

    R = quat_to_rotation(kin.q)
    omega_m = kin.omega + b_g + n_g
    a_m = np.einsum("kji,kj->ki", R, kin.a - noise.g) + b_a + n_a

    state = np.zeros((K + 1, 23))
    state[:, 0:3] = kin.p
    state[:, 3:7] = kin.q
    state[:, 7:10] = kin.v
    state[:, 10:13] = b_g
    state[:, 13:16] = b_a
    state[:, 16:19] = truth.p_IC
    state[:, 19:23] = truth.q_IC
    imu = ImuStream(t, omega_m, a_m, state)

    sig_p, sig_q = pose_noise_scale(quality, noise.sigma_p, noise.sigma_q)
    idx = np.arange(0, K + 1, rates.ratio)
    h1 = kin.p[idx] + np.einsum("kij,j->ki", R[idx], truth.p_IC)
    h2 = quat_multiply(kin.q[idx], truth.q_IC)
    n_p = rng.normal(size=(len(idx), 3)) * sig_p
    n_q = rng.normal(size=(len(idx), 3)) * sig_q
    z_q = quat_multiply(quat_exp(n_q), h2)
    pose = PoseStream(t[idx], h1 + n_p, z_q, idx, sig_p, sig_q)
    return imu, pose


# ---------------------------------------------------------------------------
# filter
# ---------------------------------------------------------------------------


@dataclass
class CalibrationRunResult:
    t: NDArray
    trans_err: NDArray  # (n, 3) estimate minus truth [m]
    rot_err: NDArray  # (n,) rotation angle [rad]
    ext_error: NDArray  # (n, 6) error-state of the extrinsics (truth boxminus estimate)
    ext_cov: NDArray  # (n, 6, 6)
    cov_trace: NDArray  # (n,) trace of the full error covariance
    sum_sq_error: float
    accel_cost: float = float("nan")
    seed: int = 0
    final_estimate: ExtrinsicParams | None = None

    def nees(self) -> NDArray:
        """Extrinsic-block NEES at each camera update."""
        return np.einsum("ni,ni->n", self.ext_error, np.linalg.solve(self.ext_cov, self.ext_error[..., None])[..., 0])

    def to_csv(self) -> str:
        rows = ["t,ex,ey,ez,rot_err,cov_trace"]
        for k in range(len(self.t)):
            e = self.trans_err[k]
            rows.append(f"{self.t[k]:.17g},{e[0]:.17g},{e[1]:.17g},{e[2]:.17g},{self.rot_err[k]:.17g},{self.cov_trace[k]:.17g}")
        return "\n".join(rows) + "\n"


def _deriv(q, v, omega, a_body, b_a, g):
    R = quat_to_rotation(q / np.linalg.norm(q))
    qdot = 0.5 * quat_multiply_raw(q, np.concatenate([[0.0], omega]))
    return v, qdot, R @ (a_body - b_a) + g


def quat_multiply_raw(q1: NDArray, q2: NDArray) -> NDArray:
    """Hamilton product without renormalization (for pure or unnormalized quaternions)."""
    w1, x1, y1, z1 = q1
    w2, x2, y2, z2 = q2
    return np.array(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]
    )


def _interp_mid(samples: NDArray, k: int) -> NDArray:
    # 4-point midpoint interpolation where neighbours exist, linear otherwise
    n = len(samples)
    if 1 <= k and k + 2 < n:
        return (-samples[k - 1] + 9 * samples[k] + 9 * samples[k + 1] - samples[k + 2]) / 16.0
    return 0.5 * (samples[k] + samples[k + 1])


def _rk4_step(p, q, v, bg, ba, w0, wm, w1, a0, am, a1, dt, g):
    k1 = _deriv(q, v, w0 - bg, a0, ba, g)
    q2 = q + 0.5 * dt * k1[1]
    k2 = _deriv(q2, v + 0.5 * dt * k1[2], wm - bg, am, ba, g)
    q3 = q + 0.5 * dt * k2[1]
    k3 = _deriv(q3, v + 0.5 * dt * k2[2], wm - bg, am, ba, g)
    q4 = q + dt * k3[1]
    k4 = _deriv(q4, v + dt * k3[2], w1 - bg, a1, ba, g)
    p = p + dt / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
    q = quat_normalize(q + dt / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]))
    v = v + dt / 6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
    return p, q, v


def ekf_calibrate(
    imu: ImuStream,
    pose: PoseStream,
    initial: AugmentedState,
    P0: NDArray,
    noise: NoiseSpec,
    truth: ExtrinsicParams | None = None,
    seed: int = 0,
    max_update_iters: int = 5,
) -> CalibrationRunResult:
    """Error-state EKF over the full 21-dim state; returns extrinsic errors at each pose update.

    Pose updates are iterated (``max_update_iters=1`` gives the plain EKF
    update). ``truth`` defaults to the extrinsics recorded in the IMU stream.
    """
    P = np.array(P0, dtype=float)
    if P.shape != (ERROR_DIM, ERROR_DIM) or not np.allclose(P, P.T) or np.linalg.eigvalsh(P)[0] <= 0:
        raise ValueError("P0 must be a 21x21 symmetric positive definite matrix")
    if truth is None:
        truth = ExtrinsicParams(imu.truth[0, 16:19], imu.truth[0, 19:23])
    g = noise.g
    Qc = noise.process_psd()
    # floor keeps S invertible when the simulated noise is zero
    Rm = np.diag(np.maximum(np.repeat([pose.sigma_p, pose.sigma_q], 3), MIN_POSE_SIGMA) ** 2)

    vs, ex = initial.vehicle, initial.extrinsics
    p, q, v = vs.p_WI.copy(), vs.q_WI.copy(), vs.v_W.copy()
    bg, ba = vs.b_g.copy(), vs.b_a.copy()
    pic, qic = ex.p_IC.copy(), ex.q_IC.copy()

    n_pose = len(pose.t)
    out_t = np.empty(n_pose)
    tr_err = np.empty((n_pose, 3))
    rot_err = np.empty(n_pose)
    ext_err = np.empty((n_pose, 6))
    ext_cov = np.empty((n_pose, 6, 6))
    cov_tr = np.empty(n_pose)
    I21 = np.eye(ERROR_DIM)
    K_imu = len(imu.t) - 1

    def check(P, k):
        P = 0.5 * (P + P.T)
        lam = np.linalg.eigvalsh(P)[0]
        if not np.isfinite(lam) or lam < _PD_TOL:
            raise FilterDivergence(f"covariance lost positive definiteness at t = {imu.t[k]:.4f} s (min eig {lam:.3e})")
        return P

    j = 0
    for k in range(K_imu + 1):
        if j < n_pose and pose.imu_index[j] == k:
            # iterated update: relinearize the pose model at the corrected estimate
            d = np.zeros(ERROR_DIM)
            for _ in range(max_update_iters):
                pi, qi = p + d[P_WI], quat_multiply(q, quat_exp(d[TH_WI]))
                pici, qici = pic + d[P_IC], quat_multiply(qic, quat_exp(d[TH_IC]))
                H = pose_jacobian(qi, pici, qici)
                h1 = pi + quat_to_rotation(qi) @ pici
                h2 = quat_multiply(qi, qici)
                r = np.concatenate([pose.p[j] - h1, quat_log(quat_multiply(pose.q[j], quat_conjugate(h2)))])
                S = H @ P @ H.T + Rm
                Kg = np.linalg.solve(S, H @ P).T
                d_new = Kg @ (r + H @ d)
                done = np.max(np.abs(d_new - d)) < 1e-10
                d = d_new
                if done:
                    break
            IKH = I21 - Kg @ H
            P = IKH @ P @ IKH.T + Kg @ Rm @ Kg.T
            # reset: re-express the attitude error blocks about the corrected estimate
            Gr = I21.copy()
            Gr[TH_WI, TH_WI] -= 0.5 * skew(d[TH_WI])
            Gr[TH_IC, TH_IC] -= 0.5 * skew(d[TH_IC])
            P = check(Gr @ P @ Gr.T, k)
            p = p + d[P_WI]
            q = quat_multiply(q, quat_exp(d[TH_WI]))
            v = v + d[V_W]
            bg = bg + d[B_G]
            ba = ba + d[B_A]
            pic = pic + d[P_IC]
            qic = quat_multiply(qic, quat_exp(d[TH_IC]))

            e_rot = quat_log(quat_multiply(quat_conjugate(qic), truth.q_IC))
            out_t[j] = imu.t[k]
            tr_err[j] = pic - truth.p_IC
            rot_err[j] = np.linalg.norm(e_rot)
            ext_err[j] = np.concatenate([truth.p_IC - pic, e_rot])
            ext_cov[j] = P[EXT, EXT]
            cov_tr[j] = np.trace(P)
            j += 1
        if k == K_imu:
            break
        dt = imu.t[k + 1] - imu.t[k]
        # covariance first, at the pre-step estimate
        F, G = motion_jacobians(q, imu.omega_m[k] - bg, imu.a_m[k] - ba)
        Ft = I21 + dt * F
        P = check(Ft @ P @ Ft.T + dt * (G @ Qc @ G.T), k)
        wm = _interp_mid(imu.omega_m, k)
        am = _interp_mid(imu.a_m, k)
        p, q, v = _rk4_step(p, q, v, bg, ba, imu.omega_m[k], wm, imu.omega_m[k + 1], imu.a_m[k], am, imu.a_m[k + 1], dt, g)

    return CalibrationRunResult(
        out_t[:j],
        tr_err[:j],
        rot_err[:j],
        ext_err[:j],
        ext_cov[:j],
        cov_tr[:j],
        float(np.sum(tr_err[:j] ** 2)),
        seed=seed,
        final_estimate=ExtrinsicParams(pic, qic),
    )


# ---------------------------------------------------------------------------
# initial guesses and full runs
# ---------------------------------------------------------------------------


def truth_state(imu: ImuStream, k: int = 0) -> AugmentedState:
    return AugmentedState.from_vector(imu.truth[k])


def perturbed_guess(
    truth: AugmentedState,
    P0: NDArray,
    rng: np.random.Generator,
    ext_offset: tuple[float, float] | None = (0.05, np.deg2rad(5.0)),
) -> AugmentedState:
    """Initial estimate with vehicle errors drawn from ``P0``.

    Extrinsic errors are fixed-magnitude offsets in random directions, or drawn
    from ``P0`` too when ``ext_offset`` is None.
    """
    delta = np.linalg.cholesky(P0) @ rng.normal(size=ERROR_DIM)
    if ext_offset is not None:
        u1 = rng.normal(size=3)
        u2 = rng.normal(size=3)
        delta[P_IC] = ext_offset[0] * u1 / np.linalg.norm(u1)
        delta[TH_IC] = ext_offset[1] * u2 / np.linalg.norm(u2)
    vs, ex = truth.vehicle, truth.extrinsics
    return AugmentedState(
        VehicleState(
            vs.p_WI + delta[P_WI],
            quat_multiply(vs.q_WI, quat_exp(delta[TH_WI])),
            vs.v_W + delta[V_W],
            vs.b_g + delta[B_G],
            vs.b_a + delta[B_A],
        ),
        ExtrinsicParams(ex.p_IC + delta[P_IC], quat_multiply(ex.q_IC, quat_exp(delta[TH_IC]))),
    )


def knot_accel_cost(spline: UniformSpline) -> float:
    """Sum of squared acceleration knots (second differences of the knots over dt^2)."""
    acc = np.diff(spline.knots, n=2, axis=0) / spline.dt_knot**2
    return float(np.sum(acc**2))


def run_calibration(
    traj: UniformSpline,
    truth: ExtrinsicParams,
    noise: NoiseSpec,
    P0: NDArray,
    rates: SensorRates = SensorRates(),
    quality: QualityLevel = QualityLevel(),
    seed: int = 0,
    ext_offset: tuple[float, float] | None = (0.05, np.deg2rad(5.0)),
) -> CalibrationRunResult:
    """Simulate, perturb the initial state, filter. Streams and guess share one seed."""
    imu, pose = simulate_run(traj, truth, noise, rates, quality, seed)
    rng = np.random.default_rng([seed, 1])
    guess = perturbed_guess(truth_state(imu), P0, rng, ext_offset)
    res = ekf_calibrate(imu, pose, guess, P0, noise, truth, seed)
    res.accel_cost = knot_accel_cost(traj)
    return res


# ---------------------------------------------------------------------------
# summaries
# ---------------------------------------------------------------------------


def normalized_cost(runs: Mapping[str, Sequence[CalibrationRunResult]]) -> dict[str, float]:
    """Per-method mean acceleration cost divided by the largest per-method mean."""
    if not runs or any(len(r) == 0 for r in runs.values()):
        raise ValueError("every method needs at least one run")
    means = {m: float(np.mean([r.accel_cost for r in rs])) for m, rs in runs.items()}
    top = max(means.values())
    if top <= 0:
        return {m: 0.0 for m in means}
    return {m: v / top for m, v in means.items()}


def cost_normalized_error(norm_cost: float, sum_sq_error: float) -> float:
    if norm_cost < 0 or sum_sq_error < 0:
        raise ValueError("inputs must be non-negative")
    return norm_cost * sum_sq_error


def nees_envelope(n_runs: int, dim: int = 6, level: float = 0.95) -> tuple[float, float]:
    """Two-sided chi-square bounds on the run-averaged NEES."""
    a = (1 - level) / 2
    lo, hi = chi2.ppf([a, 1 - a], dim * n_runs)
    return lo / n_runs, hi / n_runs


@dataclass
class NeesSummary:
    mean_nees: NDArray
    bounds: tuple
    fraction_inside: float = field(init=False)

    def __post_init__(self):
        inside = (self.mean_nees >= self.bounds[0]) & (self.mean_nees <= self.bounds[1])
        self.fraction_inside = float(np.mean(inside))


def nees_monte_carlo(results: Sequence[CalibrationRunResult], level: float = 0.95) -> NeesSummary:
    stack = np.stack([r.nees() for r in results])
    return NeesSummary(stack.mean(axis=0), nees_envelope(len(results), 6, level))
