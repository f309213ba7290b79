import numpy as np
import pytest
from hypothesis import given, strategies as st

from quadcert.trajectory import (S_CURVE, SingularTimingError, TimedWaypoint, _constraints, _snap_hessian,
                                 min_snap, next_sample_reference, read_waypoints_csv, sample,
                                 snap_costs_on_grid, write_sampled_csv, write_waypoints_csv)


@pytest.fixture(scope="module")
def s_curve():
    return min_snap(list(S_CURVE))


def test_two_point_line():
    traj = min_snap([TimedWaypoint((0, 0, 0), 1.0), TimedWaypoint((2, -1, 0.5), 3.0)])
    assert np.abs(traj.derivative(1.0) - [0, 0, 0]).max() < 1e-9
    assert np.abs(traj.derivative(3.0) - [2, -1, 0.5]).max() < 1e-9
    for order in (1, 2, 3):
        assert np.abs(traj.derivative(1.0, order)).max() < 1e-9
        assert np.abs(traj.derivative(3.0, order)).max() < 1e-9
    # rest-to-rest symmetry puts the midpoint halfway
    assert np.allclose(traj.derivative(2.0), [1, -0.5, 0.25], atol=1e-12)


def test_identical_points_constant():
    traj = min_snap([TimedWaypoint((1, 2, 3), 0.0), TimedWaypoint((1, 2, 3), 4.0)])
    t = np.linspace(0, 4, 17)
    assert np.allclose(traj.derivative(t), [1, 2, 3], atol=1e-12)
    assert traj.snap_cost() == pytest.approx(0.0, abs=1e-20)


def test_s_curve_interpolation_and_continuity(s_curve):
    for w in S_CURVE:
        assert np.abs(s_curve.derivative(w.t) - w.position).max() < 1e-6
    eps = 1e-9
    for w in S_CURVE[1:-1]:
        for order in range(5):
            left = s_curve.derivative(w.t - eps, order)
            right = s_curve.derivative(w.t + eps, order)
            assert np.abs(left - right).max() < 1e-6


def test_s_curve_snap_below_cubic_baseline():
    snap, cubic = snap_costs_on_grid(list(S_CURVE))
    assert snap < cubic


def test_snap_cost_exact_against_quadrature(s_curve):
    t = np.linspace(s_curve.t0, s_curve.t1, 180_001)
    d4 = s_curve.derivative(t, 4)
    numeric = np.trapezoid(np.sum(d4 ** 2, axis=1), t)
    assert s_curve.snap_cost() == pytest.approx(numeric, rel=1e-6)


def test_snap_hessian_monomials():
    H = _snap_hessian()
    # d^4 tau^4 / d tau^4 = 24, so the (4, 4) entry is 24^2
    assert H[4, 4] == pytest.approx(576.0)
    assert np.all(H[:4] == 0) and np.allclose(H, H.T)


def test_stationarity_under_feasible_perturbation(s_curve, rng):
    # moving the coefficients along the null space of the constraints keeps the
    # trajectory feasible; at the optimum no such move lowers the cost
    wps = list(S_CURVE)
    base = s_curve.snap_cost()
    A, _ = _constraints(np.array([w.t for w in wps]))
    c0 = s_curve.coeffs.transpose(2, 0, 1).reshape(3, -1)
    Z = np.linalg.svd(A)[2][np.linalg.matrix_rank(A):].T
    for _ in range(20):
        d = Z @ rng.standard_normal(Z.shape[1])
        axis = rng.integers(3)
        coeffs = c0.copy()
        coeffs[axis] += 1e-3 * d
        moved = type(s_curve)(s_curve.knots, coeffs.reshape(3, *s_curve.coeffs.shape[:2]).transpose(1, 2, 0))
        assert np.abs(A @ coeffs[axis] - A @ c0[axis]).max() < 1e-9
        assert moved.snap_cost() >= base - 1e-12


def test_sample_consistency(s_curve):
    h = 1e-4
    for t in (0.7, 4.2, 10.0, 15.5):
        pos, vel, acc, psi = sample(s_curve, t)
        fd = (sample(s_curve, t + h)[0] - sample(s_curve, t - h)[0]) / (2 * h)
        assert np.abs(fd - vel).max() < 1e-6
        assert psi == 0
    with pytest.raises(ValueError):
        sample(s_curve, 18.5)


def test_next_sample_reference(s_curve):
    ref = next_sample_reference(s_curve, 0.01)
    assert np.allclose(ref(5.0)[:3], s_curve.derivative(5.01))
    assert np.allclose(ref(18.0)[:3], [12, 0, 0], atol=1e-9) and ref(18.0)[3] == 0


def test_bad_timing():
    with pytest.raises(ValueError):
        min_snap([TimedWaypoint((0, 0, 0), 0.0)])
    with pytest.raises((ValueError, SingularTimingError)):
        min_snap([TimedWaypoint((0, 0, 0), 0.0), TimedWaypoint((1, 0, 0), 0.0)])
    with pytest.raises((ValueError, SingularTimingError)):
        min_snap([TimedWaypoint((0, 0, 0), 1.0), TimedWaypoint((1, 0, 0), 0.5)])


def test_waypoint_csv_roundtrip(tmp_path):
    path = tmp_path / "wp.csv"
    write_waypoints_csv(S_CURVE, path)
    back = read_waypoints_csv(path)
    assert [tuple(w.position) for w in back] == [tuple(w.position) for w in S_CURVE]
    assert [w.t for w in back] == [w.t for w in S_CURVE]
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_waypoints_csv(bad)


def test_sampled_csv(tmp_path, s_curve):
    path = tmp_path / "traj.csv"
    write_sampled_csv(s_curve, path)
    rows = path.read_text().splitlines()
    assert len(rows) == 1 + 1801


@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(0.5, 4.0)),
                min_size=2, max_size=6))
def test_random_waypoints_interpolated_and_smooth(pts):
    t, wps = 0.0, []
    for x, y, z, dt in pts:
        wps.append(TimedWaypoint((x, y, z), t))
        t += dt
    traj = min_snap(wps)
    for w in wps:
        assert np.abs(traj.derivative(w.t) - w.position).max() < 1e-6
    for w in wps[1:-1]:
        for order in range(5):
            jump = traj.derivative(w.t - 1e-10, order) - traj.derivative(w.t + 1e-10, order)
            assert np.abs(jump).max() < 1e-6 * max(1.0, np.abs(traj.derivative(w.t, order)).max())
