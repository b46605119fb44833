import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from obstraj.rigid_body import quat_conjugate, quat_log, quat_multiply, quat_to_rotation
from obstraj.spline import (
    FlatnessSingularityError,
    SplineDomainError,
    SplineFormatError,
    UniformSpline,
    derivative_knots,
    evaluate,
    flat_to_kinematics,
    flat_to_state,
    format_spline,
    load_spline,
    mixing_matrix,
    parse_spline,
    save_spline,
    spline_kinematics,
)

from oracles import de_boor_eval

G = np.array([0.0, 0.0, -9.81])


def _random_spline(rng, k, n=12, dt=0.5, t0=0.0, scale=1.0):
    return UniformSpline(scale * rng.normal(size=(n, 4)), k, dt, t0)


# --- evaluation -----------------------------------------------------------------


def test_order_two_is_linear_interpolation(rng):
    s = _random_spline(rng, 2)
    for i in range(1, s.n_knots - 1):
        for u in (0.0, 0.3, 0.9):
            t = s.t0 + (i + u) * s.dt_knot
            lin = s.knots[i - 1] + u * (s.knots[i] - s.knots[i - 1])
            np.testing.assert_allclose(s.eval(t), lin, atol=1e-13)
            np.testing.assert_allclose(s.eval(t), de_boor_eval(s.knots, 2, s.dt_knot, s.t0, t), atol=1e-13)


@pytest.mark.parametrize("k", [2, 3, 4, 5, 6])
def test_constant_knots_reproduce_constant(k):
    c = np.array([1.5, -2.0, 0.25, 0.7])
    s = UniformSpline(np.tile(c, (k + 3, 1)), k)
    t = np.linspace(s.t_start, s.t_end, 57)
    np.testing.assert_allclose(s.eval(t), np.broadcast_to(c, (57, 4)), atol=1e-13)


@pytest.mark.parametrize("k", [3, 4, 6])
def test_matches_de_boor(rng, k):
    s = _random_spline(rng, k, dt=0.37, t0=-1.2)
    t = np.linspace(s.t_start, s.t_end, 100)
    ref = np.array([de_boor_eval(s.knots, k, s.dt_knot, s.t0, ti) for ti in t])
    np.testing.assert_allclose(s.eval(t), ref, atol=1e-12)


def test_mixing_matrix_rows_partition_of_unity():
    for k in range(2, 8):
        M = mixing_matrix(k)
        # cumulative weight of the first knot is 1 for every u
        np.testing.assert_allclose(M[0], np.eye(k)[0], atol=1e-15)


def test_outside_span_rejected(rng):
    s = _random_spline(rng, 4)
    with pytest.raises(SplineDomainError, match="span"):
        s.eval(s.t_start - 0.1)
    with pytest.raises(SplineDomainError):
        s.eval(s.t_end + 0.1)


def test_batched_knots(rng):
    K = rng.normal(size=(3, 10, 4))
    t = np.linspace(2.5, 5.0, 7)
    out = evaluate(K, 6, 0.5, 0.0, t, 1)
    assert out.shape == (3, 7, 4)
    for b in range(3):
        np.testing.assert_allclose(out[b], UniformSpline(K[b]).eval(t, 1))


def test_invalid_construction():
    with pytest.raises(ValueError):
        UniformSpline(np.zeros((5, 4)), 6)
    with pytest.raises(ValueError):
        UniformSpline(np.zeros((8, 3)), 6)
    with pytest.raises(ValueError):
        UniformSpline(np.zeros((8, 4)), 6, dt_knot=0.0)


def test_span_of_fifteen_knots():
    s = UniformSpline(np.zeros((15, 4)), 6, 0.5)
    assert s.span == pytest.approx((15 - 6 + 1) * 0.5)


# --- derivatives ----------------------------------------------------------------


def test_constant_spline_has_zero_velocity():
    s = UniformSpline(np.ones((9, 4)), 6)
    assert np.allclose(s.eval(np.linspace(s.t_start, s.t_end, 11), 1), 0.0)


def test_linear_knots_constant_velocity():
    knots = np.zeros((10, 4))
    knots[:, 0] = np.arange(10)
    s = UniformSpline(knots, 4, 0.5)
    t = np.linspace(s.t_start, s.t_end, 41)
    np.testing.assert_allclose(s.eval(t, 1), np.broadcast_to([2.0, 0, 0, 0], (41, 4)), atol=1e-12)
    # position agrees with the reference evaluation (linear reproduction)
    ref = np.array([de_boor_eval(knots, 4, 0.5, 0.0, ti) for ti in t])
    np.testing.assert_allclose(s.eval(t), ref, atol=1e-12)


@pytest.mark.parametrize("d", [1, 2, 3])
def test_derivatives_match_finite_differences(rng, d):
    s = _random_spline(rng, 6)
    t = np.linspace(s.t_start + 0.01, s.t_end - 0.01, 23)
    h = 1e-4
    fd = (s.eval(t + h, d - 1) - s.eval(t - h, d - 1)) / (2 * h)
    np.testing.assert_allclose(s.eval(t, d), fd, atol=1e-5 * max(1.0, np.abs(fd).max()))


@pytest.mark.parametrize("k", [4, 6])
def test_continuity_at_segment_boundaries(rng, k):
    s = _random_spline(rng, k)
    eps = 1e-9
    for i in range(k, s.n_knots):
        tb = s.t0 + i * s.dt_knot
        for d in range(k - 1):
            lhs = s.eval(tb - eps, d)
            rhs = s.eval(tb + eps, d)
            assert np.max(np.abs(lhs - rhs)) < 1e-12 + 1e-7 * 10**d


def test_derivative_knots_trivial_cases():
    eq = UniformSpline(np.ones((8, 4)), 6)
    assert not np.any(derivative_knots(eq, 1)) and not np.any(derivative_knots(eq, 2))
    knots = np.outer(np.arange(8.0), [1.0, 2.0, 0.0, -1.0])
    lin = UniformSpline(knots, 6, 0.5)
    np.testing.assert_allclose(derivative_knots(lin, 1), np.tile([2.0, 4.0, 0.0, -2.0], (7, 1)))
    np.testing.assert_allclose(derivative_knots(lin, 2), 0.0, atol=1e-12)
    with pytest.raises(ValueError):
        derivative_knots(lin, 3)


@pytest.mark.parametrize("seed", range(10))
def test_velocity_within_knot_hull(seed):
    r = np.random.default_rng(seed)
    s = _random_spline(r, 6, n=15)
    t = np.linspace(s.t_start, s.t_end, 2000)
    for d in (1, 2):
        bound = np.abs(derivative_knots(s, d)).max(axis=0)
        assert np.all(np.abs(s.eval(t, d)).max(axis=0) <= bound + 1e-12)


# --- flatness -------------------------------------------------------------------


def test_hover_flatness():
    z = np.zeros(4)
    kin = flat_to_kinematics(z, z, z, z)
    np.testing.assert_allclose(kin.q, [1, 0, 0, 0], atol=1e-15)
    np.testing.assert_allclose(kin.omega, 0.0, atol=1e-15)
    np.testing.assert_allclose(kin.a, 0.0)


def test_vertical_acceleration_keeps_attitude():
    a = np.array([0.0, 0.0, 1.0, 0.0])
    z = np.zeros(4)
    kin = flat_to_kinematics(z, z, a, z)
    np.testing.assert_allclose(kin.q, [1, 0, 0, 0], atol=1e-15)
    assert kin.thrust == pytest.approx(np.linalg.norm(a[:3] - G))


def test_free_fall_rejected():
    z = np.zeros(4)
    with pytest.raises(FlatnessSingularityError):
        flat_to_kinematics(z, z, np.array([0.0, 0.0, -9.81, 0.0]), z)


@given(st.floats(-1.0, 1.0), st.floats(-2.0, 2.0), st.floats(-3.0, 3.0))
def test_body_z_aligned_with_thrust(ax, ay, psi):
    kin = flat_to_kinematics(np.array([0, 0, 0, psi]), np.zeros(4), np.array([ax, ay, 0.5, 0]), np.zeros(4))
    R = quat_to_rotation(kin.q)
    thrust = np.array([ax, ay, 0.5]) - G
    np.testing.assert_allclose(R[:, 2], thrust / np.linalg.norm(thrust), atol=1e-12)
    # heading: body y is orthogonal to the horizontal yaw direction
    x_c = np.array([np.cos(psi), np.sin(psi), 0.0])
    assert abs(R[:, 1] @ x_c) < 1e-12
    assert R[:, 0] @ x_c > 0


@pytest.mark.parametrize("seed", range(3))
def test_body_rate_matches_attitude_differences(seed):
    r = np.random.default_rng(seed)
    s = _random_spline(r, 6, n=14, scale=0.5)
    t = np.linspace(s.t_start + 0.05, s.t_end - 0.05, 40)
    h = 1e-4
    kin = spline_kinematics(s.knots, 6, s.dt_knot, s.t0, t)
    qp = spline_kinematics(s.knots, 6, s.dt_knot, s.t0, t + h).q
    qm = spline_kinematics(s.knots, 6, s.dt_knot, s.t0, t - h).q
    omega_fd = quat_log(quat_multiply(quat_conjugate(qm), qp)) / (2 * h)
    assert np.max(np.abs(kin.omega - omega_fd)) < 1e-3


def test_flat_to_state_samples(rng):
    s = _random_spline(rng, 6, scale=0.3)
    state, u = flat_to_state(s.flat_state(3.3))
    np.testing.assert_allclose(state.vehicle.p_WI, s.eval(3.3)[:3])
    np.testing.assert_allclose(state.vehicle.v_W, s.eval(3.3, 1)[:3])
    np.testing.assert_allclose(u.a_W, s.eval(3.3, 2)[:3])


# --- file format ----------------------------------------------------------------


def test_format_roundtrip_exact(rng, tmp_path):
    s = UniformSpline(rng.normal(size=(15, 4)), 6, 0.5, 0.125)
    np.testing.assert_array_equal(parse_spline(format_spline(s)).knots, s.knots)
    path = tmp_path / "a.spline"
    save_spline(s, path)
    loaded = load_spline(path)
    np.testing.assert_array_equal(loaded.knots, s.knots)
    assert (loaded.order, loaded.dt_knot, loaded.t0) == (6, 0.5, 0.125)


@pytest.mark.parametrize(
    "text, match",
    [
        ("order 6\ndt_knot 0.5\nt0 0\nknots 6\n" + "0 0 0 0\n" * 5, "expected 6 knot rows"),
        ("order 6\ndt_knot 0.5\nt0 0\nknots 6\n" + "0 0 0\n" * 6, "line 5"),
        ("order 6\ndt_knot 0.5\nknots 6\n" + "0 0 0 0\n" * 6, "missing"),
        ("order 6\ncolor red\n", "unknown key"),
        ("order 6\ndt_knot 0.5\nt0 0\nknots 6\n" + "0 0 x 0\n" * 6, "non-numeric"),
        ("order 9\ndt_knot 0.5\nt0 0\nknots 6\n" + "0 0 0 0\n" * 6, "order"),
    ],
)
def test_malformed_files_rejected(text, match):
    with pytest.raises(SplineFormatError, match=match):
        parse_spline(text)
