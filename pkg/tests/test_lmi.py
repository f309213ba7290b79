import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, strategies as st

from quadcert.dynamics import AlphaBounds, Quadcopter, linearize
from quadcert.lmi import (Certificate, DimensionError, InitialInfeasibleError, LmiInstance,
                          SearchSchedule, SearchTrace, SyntheticGate, assemble_lmi, check_feasible,
                          lmi_margin, maximize_L_S, validate_certificate)
from quadcert.sector import DomainBox, SectorBounds, estimate_sector_bounds

S0 = DomainBox.symmetric((1.5, 0.2, 1.5, 0.2))
UNIT = DomainBox(np.array([-1.0]), np.array([1.0]))
NO_ALPHA = AlphaBounds((0.0,) * 4, (0.0,) * 4)


@pytest.fixture(scope="module")
def quad_instance():
    return LmiInstance(linearize(Quadcopter()).A_K, estimate_sector_bounds(S0, 1.0), 1.0)


def random_vars(rng, n, m):
    P = rng.standard_normal((n, n))
    return P + P.T, rng.uniform(0, 1, (n, n + m)), rng.uniform(0, 1, (m, n))


def lyapunov_certificate(S=S0, margin=-1.0):
    lin = linearize(Quadcopter())
    P = sla.solve_continuous_lyapunov(lin.A_K.T, -np.eye(12))
    return Certificate(P, np.zeros((12, 16)), np.zeros((4, 12)), lin.K, 0.0, S, margin)


# --- assembly -------------------------------------------------------------------------

def test_quad_size_and_exact_symmetry(quad_instance, rng):
    M = assemble_lmi(quad_instance, *random_vars(rng, 12, 4))
    assert M.shape == (252, 252)
    assert np.array_equal(M, M.T)


def test_affine_in_variables(quad_instance, rng):
    v1, v2 = random_vars(rng, 12, 4), random_vars(rng, 12, 4)
    M0 = assemble_lmi(quad_instance, np.zeros((12, 12)), np.zeros((12, 16)), np.zeros((4, 12)))
    for lam in (0.3, -0.7, 2.5):
        mix = [lam * a + (1 - lam) * b for a, b in zip(v1, v2)]
        lhs = assemble_lmi(quad_instance, *mix)
        rhs = lam * assemble_lmi(quad_instance, *v1) + (1 - lam) * assemble_lmi(quad_instance, *v2)
        # homogeneous and linear: the constant part is zero
        assert np.abs(M0).max() == 0
        assert np.abs(lhs - rhs).max() <= 1e-12 * max(1.0, np.abs(rhs).max())


def test_hand_expanded_scalar_instance():
    # ds/dt = A s + xi_s + xi_u, xi_j = delta_j w_j with delta_j in [lo_j, hi_j].
    # Each sector gives lam_j (a_j w_j^2 + 2 c_j w_j xi_j - xi_j^2) >= 0, the input bound
    # gives g (L^2 s^2 - chi^2) >= 0, and V = p s^2.  Variables ordered (s, chi, xi_s, xi_u).
    A, L = -0.7, 1.3
    lo, hi = np.array([[-0.4, 0.1]]), np.array([[0.6, 0.5]])
    p, l0, l1, g = 2.0, 0.3, 0.9, 0.25
    c = (lo + hi)[0] / 2
    cbar = np.maximum(np.abs(lo), np.abs(hi))[0]
    a = cbar ** 2 - c ** 2
    hand = np.array([
        [2 * p * A + l0 * a[0] + L ** 2 * g, 0.0, p + l0 * c[0], p],
        [0.0, l1 * a[1] - g, 0.0, l1 * c[1]],
        [p + l0 * c[0], 0.0, -l0, 0.0],
        [p, l1 * c[1], 0.0, -l1],
    ])
    inst = LmiInstance(np.array([[A]]), SectorBounds(lo, hi), L)
    M = assemble_lmi(inst, [[p]], [[l0, l1]], [[g]])
    assert M.shape == (4, 4)
    assert np.abs(M - hand).max() <= 1e-12


def test_multiplier_free_degenerate(rng):
    A = rng.standard_normal((3, 3))
    inst = LmiInstance(A, SectorBounds(np.zeros((3, 5)), np.zeros((3, 5))), 0.5)
    P = np.eye(3) * 2.0
    M = assemble_lmi(inst, P, np.zeros((3, 5)), np.zeros((2, 3)))
    assert np.allclose(M[:3, :3], P @ A + A.T @ P, atol=1e-15)
    assert np.all(M[3:, 3:] == 0)
    # the coupling of the state with the residual channels is R^T P alone
    assert np.allclose(M[9:, :3], np.repeat(P, 5, axis=0), atol=1e-15)


def test_dimension_checks(quad_instance):
    with pytest.raises(DimensionError):
        assemble_lmi(quad_instance, np.eye(3), np.zeros((12, 16)), np.zeros((4, 12)))
    with pytest.raises(DimensionError):
        LmiInstance(np.eye(2), SectorBounds(np.zeros((3, 4)), np.zeros((3, 4))), 1.0)


# --- feasibility ----------------------------------------------------------------------

def test_scalar_stable_toy_feasible():
    d = 1e-3
    sector = SectorBounds(np.array([[-d, 0.1 - d]]), np.array([[d, 0.1 + d]]))
    res = check_feasible(LmiInstance(np.array([[-1.0]]), sector, 0.1))
    assert res.feasible and res.margin < -1e-7
    assert res.P[0, 0] >= 1.0 - 1e-6
    # the scalar Lyapunov inequality 2 p A < 0 holds for the witness
    assert 2 * res.P[0, 0] * -1.0 < 0


def test_scalar_unstable_toy_infeasible():
    for L in (0.0, 0.1, 5.0):
        res = check_feasible(LmiInstance(np.array([[1.0]]), SectorBounds(np.zeros((1, 2)), np.zeros((1, 2))), L))
        assert not res.feasible and res.margin > 0


def test_witness_replay():
    gate = SyntheticGate()
    res = gate.check(1.5, UNIT)
    assert lmi_margin(gate.instance(1.5, UNIT), res.P, res.Lam, res.gam) <= res.margin + 1e-7
    assert np.linalg.eigvalsh(res.P)[0] >= 1e-8


def test_gate_threshold_sides():
    gate = SyntheticGate()
    assert gate.check(1.9, UNIT).feasible
    assert not gate.check(2.1, UNIT).feasible


@given(st.floats(2.05, 6.0), st.floats(0.0, 4.0))
def test_monotone_infeasibility_on_gate(L, extra):
    # the sector is held fixed; only the L^2 term of the constraint grows
    gate = SyntheticGate()
    sector = gate.instance(L, UNIT).sector
    assert not check_feasible(LmiInstance(np.array([[gate.a]]), sector, L)).feasible
    assert not check_feasible(LmiInstance(np.array([[gate.a]]), sector, L + extra)).feasible


# --- search ---------------------------------------------------------------------------

def test_gate_search_recovers_threshold():
    trace = SearchTrace()
    L, S, cert = maximize_L_S(SyntheticGate(), 1.0, UNIT, SearchSchedule(grow=(0,)), trace)
    assert 2.0 * (1 - 1e-3) <= L <= 2.0
    assert cert.margin < -1e-7 and np.linalg.eigvalsh(cert.P)[0] > 0
    assert trace.feasible[0] and len(trace.L) == len(trace.feasible)


def test_gate_threshold_scales_with_a():
    gate = SyntheticGate(a=-0.5)
    L, _, _ = maximize_L_S(gate, 0.5, UNIT, SearchSchedule(grow=(0,)))
    assert abs(L - gate.threshold) <= 1e-3 * gate.threshold


def test_growth_one_returns_start():
    L, S, cert = maximize_L_S(SyntheticGate(), 1.0, UNIT, SearchSchedule(growth=1.0))
    assert L == 1.0 and S is UNIT and cert.L_star == 1.0


def test_infeasible_start_raises():
    with pytest.raises(InitialInfeasibleError):
        maximize_L_S(SyntheticGate(), 3.0, UNIT, SearchSchedule(grow=(0,)))


def test_static_gain_counterexample_bounds_any_sound_L():
    # u = D s with a rank-one D of spectral norm just above 1 / sigma_max(A_K^-1 B0)
    # moves a closed-loop pole into the right half plane; such a controller is
    # ||D||-Lipschitz, so no sound certificate can reach that L.
    lin = linearize(Quadcopter())
    G = -np.linalg.solve(lin.A_K, lin.B0)
    U, s, Vt = np.linalg.svd(G)
    D = 1.02 * np.outer(Vt[0], U[:, 0]) / s[0]
    assert np.linalg.norm(D, 2) < 0.0142
    assert np.linalg.eigvals(lin.A_K + lin.B0 @ D).real.max() > 0


# --- certificates ---------------------------------------------------------------------

def test_certificate_roundtrip(tmp_path):
    cert = lyapunov_certificate()
    path = tmp_path / "cert.json"
    cert.save(path)
    back = Certificate.load(path)
    for name in ("P", "Lam", "gam", "K"):
        assert np.array_equal(getattr(back, name), getattr(cert, name))
    assert np.array_equal(back.S_star.upper, cert.S_star.upper)
    assert back.S_star.groups == cert.S_star.groups and back.margin == cert.margin


def test_certificate_rejects_bad_fields():
    with pytest.raises(ValueError):
        lyapunov_certificate(margin=0.1)
    cert = lyapunov_certificate()
    with pytest.raises(ValueError):
        Certificate(-cert.P, cert.Lam, cert.gam, cert.K, 0.0, S0, -1.0)


def test_sublevel_inscribed_in_box(rng):
    cert = lyapunov_certificate()
    from quadcert.lmi import sample_sublevel
    pts = sample_sublevel(cert.P, cert.sublevel(), 5000, rng)
    assert np.all(S0.contains(pts, tol=1e-12))
    V = np.einsum("ni,ij,nj->n", pts, cert.P, pts)
    assert V.max() <= cert.sublevel() * (1 + 1e-12)


def test_validate_zero_trials():
    rep = validate_certificate(lyapunov_certificate(), trials=0)
    assert rep.trials == 0 and rep.decreasing.size == 0 and np.isnan(rep.fraction)


def test_validate_equilibrium_start():
    cert = lyapunov_certificate(S=DomainBox(np.zeros(12), np.zeros(12), S0.groups))
    rep = validate_certificate(cert, trials=3, alpha=NO_ALPHA, T=1.0)
    assert np.all(rep.terminal_norm < 1e-12) and np.all(rep.decreasing)


def test_validate_lyapunov_certificate_nominal():
    rep = validate_certificate(lyapunov_certificate(), trials=100, alpha=NO_ALPHA)
    assert rep.fraction == 1.0
