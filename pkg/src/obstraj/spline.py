"""Uniform B-splines in (x, y, z, yaw) and the quadrotor flatness map.

Knot ``y_j`` is attached to time ``t0 + j * dt_knot``. For ``t`` in segment
``i`` (``t0 + i*dt <= t < t0 + (i+1)*dt``) the active knots are
``y_{i-k+1} .. y_i``, so with ``N + 1`` knots the curve is defined for
``i = k-1 .. N``, i.e. on ``[t0 + (k-1) dt, t0 + (N+1) dt]``.

Evaluation uses the cumulative form

    y(u) = [y_s, d_1, ..., d_{k-1}] M~ [1, u, ..., u^{k-1}]^T,
    d_j = y_{s+j} - y_{s+j-1},  s = i - k + 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .rigid_body import GRAVITY, AugmentedState, ExtrinsicParams, KinematicInput, VehicleState, rotation_to_quat

DEFAULT_ORDER = 6


class SplineDomainError(ValueError):
    pass


class FlatnessSingularityError(ValueError):
    pass


@lru_cache(maxsize=None)
def _cumulative_blending(k: int) -> tuple:
    # exact rational arithmetic so structural zeros stay exactly zero
    M = [[Fraction(0)] * k for _ in range(k)]
    for s in range(k):
        for n in range(k):
            acc = 0
            for l in range(s, k):
                acc += (-1) ** (l - s) * math.comb(k, l - s) * (k - 1 - l) ** (k - 1 - n)
            M[s][n] = Fraction(math.comb(k - 1, n) * acc, math.factorial(k - 1))
    cum = [[sum(M[l][n] for l in range(s, k)) for n in range(k)] for s in range(k)]
    return tuple(tuple(float(c) for c in row) for row in cum)


def mixing_matrix(k: int) -> NDArray:
    """Cumulative uniform B-spline mixing matrix of order ``k`` (rows: knot differences, cols: powers of u)."""
    if not 2 <= k <= 8:
        raise ValueError(f"spline order must be in [2, 8], got {k}")
    out = np.array(_cumulative_blending(k))
    out.setflags(write=False)
    return out


def _power_basis(u: NDArray, k: int, d: int) -> NDArray:
    """d-th u-derivative of [1, u, ..., u^{k-1}], shape u.shape + (k,)."""
    u = np.asarray(u, dtype=float)
    out = np.zeros(u.shape + (k,))
    for n in range(d, k):
        out[..., n] = math.perm(n, d) * u ** (n - d)
    return out


@dataclass(frozen=True)
class FlatState:
    value: NDArray
    d1: NDArray
    d2: NDArray
    d3: NDArray


@dataclass(frozen=True)
class UniformSpline:
    knots: NDArray  # (N+1, 4): x, y, z, yaw
    order: int = DEFAULT_ORDER
    dt_knot: float = 0.5
    t0: float = 0.0

    def __post_init__(self):
        knots = np.array(self.knots, dtype=float)
        if knots.ndim != 2 or knots.shape[1] != 4:
            raise ValueError("knots must have shape (N+1, 4)")
        mixing_matrix(self.order)  # validates order
        if knots.shape[0] < self.order:
            raise ValueError(f"need at least {self.order} knots for order {self.order}, got {knots.shape[0]}")
        if not self.dt_knot > 0:
            raise ValueError("dt_knot must be positive")
        knots.setflags(write=False)
        object.__setattr__(self, "knots", knots)

    @property
    def n_knots(self) -> int:
        return self.knots.shape[0]

    @property
    def t_start(self) -> float:
        return self.t0 + (self.order - 1) * self.dt_knot

    @property
    def t_end(self) -> float:
        return self.t0 + self.n_knots * self.dt_knot

    @property
    def span(self) -> float:
        return self.t_end - self.t_start

    def with_knots(self, knots: NDArray) -> "UniformSpline":
        return UniformSpline(knots, self.order, self.dt_knot, self.t0)

    def eval(self, t, d: int = 0) -> NDArray:
        """d-th time derivative at ``t`` (scalar or array); shape ``t.shape + (4,)``."""
        return evaluate(self.knots, self.order, self.dt_knot, self.t0, t, d)

    def flat_state(self, t) -> FlatState:
        return FlatState(*(self.eval(t, d) for d in range(4)))


def _segment_weights(order: int, dt_knot: float, t0: float, n_knots: int, t, d: int):
    t = np.asarray(t, dtype=float)
    k = order
    t_start = t0 + (k - 1) * dt_knot
    t_end = t0 + n_knots * dt_knot
    tol = 1e-9 * max(1.0, abs(t_end))
    if np.any(t < t_start - tol) or np.any(t > t_end + tol):
        bad = t[(t < t_start - tol) | (t > t_end + tol)]
        raise SplineDomainError(
            f"time {float(bad.flat[0])!r} outside spline span [{t_start!r}, {t_end!r}]"
        )
    if not 0 <= d <= k - 1:
        raise ValueError(f"derivative order {d} not available for spline order {k}")
    s = (t - t0) / dt_knot
    i = np.clip(np.floor(s).astype(int), k - 1, n_knots - 1)
    u = s - i
    cum = mixing_matrix(k) @ np.moveaxis(_power_basis(u, k, d), -1, 0).reshape(k, -1)
    cum = cum.T.reshape(u.shape + (k,))
    # convert weights on knot differences into weights on knots
    w = cum.copy()
    w[..., :-1] -= cum[..., 1:]
    return i - k + 1, w * dt_knot ** (-d)


def evaluate(knots: NDArray, order: int, dt_knot: float, t0: float, t, d: int = 0) -> NDArray:
    """Evaluate one spline or a batch of knot sets ``(..., N+1, 4)`` at times ``t``.

    Returns ``knots.shape[:-2] + t.shape + (4,)``.
    """
    knots = np.asarray(knots, dtype=float)
    base, w = _segment_weights(order, dt_knot, t0, knots.shape[-2], t, d)
    idx = base[..., None] + np.arange(order)  # t.shape + (k,)
    gathered = knots[..., idx, :]  # batch + t.shape + (k, 4)
    return np.einsum("...k,...kc->...c", np.broadcast_to(w, gathered.shape[:-1]), gathered)


def derivative_knots(spline: UniformSpline, d: int) -> NDArray:
    """Velocity (``d=1``) or acceleration (``d=2``) control points."""
    if d not in (1, 2):
        raise ValueError("d must be 1 or 2")
    return np.diff(spline.knots, n=d, axis=0) / spline.dt_knot**d


# ---------------------------------------------------------------------------
# differential flatness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FlatKinematics:
    """Batched output of :func:`flat_to_kinematics`."""

    p: NDArray
    q: NDArray
    v: NDArray
    a: NDArray
    omega: NDArray
    thrust: NDArray


def flat_to_kinematics(value, d1, d2, d3, g=GRAVITY) -> FlatKinematics:
    """Vectorized flatness map from (position, yaw) and derivatives to attitude and body rates."""
    value, d1, d2, d3 = (np.asarray(a, dtype=float) for a in (value, d1, d2, d3))
    a = d2[..., :3]
    jerk = d3[..., :3]
    psi = value[..., 3]
    psi_dot = d1[..., 3]
    t = a - np.asarray(g, dtype=float)
    c = np.linalg.norm(t, axis=-1)
    if np.any(c < 1e-6):
        raise FlatnessSingularityError("thrust vector a_W - g vanishes (free fall)")
    z_b = t / c[..., None]
    x_c = np.stack([np.cos(psi), np.sin(psi), np.zeros_like(psi)], -1)
    y_c = np.stack([-np.sin(psi), np.cos(psi), np.zeros_like(psi)], -1)
    y_b = np.cross(z_b, x_c)
    ny = np.linalg.norm(y_b, axis=-1)
    if np.any(ny < 1e-9):
        raise FlatnessSingularityError("body z-axis aligned with the heading direction")
    y_b = y_b / ny[..., None]
    x_b = np.cross(y_b, z_b)
    R = np.stack([x_b, y_b, z_b], axis=-1)
    h = (jerk - np.sum(z_b * jerk, -1, keepdims=True) * z_b) / c[..., None]
    q_rate = np.sum(h * x_b, -1)
    p_rate = -np.sum(h * y_b, -1)
    r_rate = (p_rate * np.sum(z_b * x_c, -1) + psi_dot * np.sum(y_b * y_c, -1)) / np.sum(x_b * x_c, -1)
    omega = np.stack([p_rate, q_rate, r_rate], -1)
    return FlatKinematics(value[..., :3], rotation_to_quat(R), d1[..., :3], a, omega, c)


def flat_to_state(fs: FlatState, g=GRAVITY, extrinsics: ExtrinsicParams | None = None):
    """Vehicle state (zero biases) and true motion for a single flat sample."""
    kin = flat_to_kinematics(fs.value, fs.d1, fs.d2, fs.d3, g)
    state = AugmentedState(VehicleState(kin.p, kin.q, kin.v), extrinsics or ExtrinsicParams())
    return state, KinematicInput(kin.omega, kin.a)


def spline_kinematics(knots, order, dt_knot, t0, t, g=GRAVITY) -> FlatKinematics:
    derivs = [evaluate(knots, order, dt_knot, t0, t, d) for d in range(4)]
    return flat_to_kinematics(*derivs, g=g)


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

_HEADER = "# obstraj uniform spline v1"


class SplineFormatError(ValueError):
    pass


def format_spline(spline: UniformSpline) -> str:
    lines = [
        _HEADER,
        f"order {spline.order}",
        f"dt_knot {spline.dt_knot:.17g}",
        f"t0 {spline.t0:.17g}",
        f"knots {spline.n_knots}",
    ]
    for row in spline.knots:
        lines.append(" ".join(f"{v:.17g}" for v in row))
    return "\n".join(lines) + "\n"


def parse_spline(text: str) -> UniformSpline:
    fields: dict[str, str] = {}
    rows: list[list[float]] = []
    n_expected = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if n_expected is None:
            if len(parts) != 2:
                raise SplineFormatError(f"line {lineno}: expected 'key value', got {raw!r}")
            key, val = parts
            if key not in ("order", "dt_knot", "t0", "knots"):
                raise SplineFormatError(f"line {lineno}: unknown key {key!r}")
            fields[key] = val
            if key == "knots":
                try:
                    n_expected = int(val)
                except ValueError:
                    raise SplineFormatError(f"line {lineno}: knot count {val!r} is not an integer") from None
            continue
        if len(parts) != 4:
            raise SplineFormatError(f"line {lineno}: knot row needs 4 values, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise SplineFormatError(f"line {lineno}: non-numeric knot value in {raw!r}") from None
    missing = {"order", "dt_knot", "t0", "knots"} - fields.keys()
    if missing:
        raise SplineFormatError(f"missing header fields: {sorted(missing)}")
    if len(rows) != n_expected:
        raise SplineFormatError(f"expected {n_expected} knot rows, found {len(rows)}")
    try:
        return UniformSpline(np.array(rows), int(fields["order"]), float(fields["dt_knot"]), float(fields["t0"]))
    except ValueError as exc:
        raise SplineFormatError(str(exc)) from None


def save_spline(spline: UniformSpline, path) -> None:
    Path(path).write_text(format_spline(spline))


def load_spline(path) -> UniformSpline:
    return parse_spline(Path(path).read_text())
