"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL verdict that is printed in the terminal
summary.  Tolerances are the ones the criteria state; nothing is relaxed to
turn a red into a green.
"""
import math
from dataclasses import replace

import numpy as np
import pytest

from quadcert import nn
from quadcert.dynamics import Quadcopter, dynamics_rhs, linearize
from quadcert.evaluation import compare_time_to_5pct
from quadcert.lmi import (InitialInfeasibleError, LmiInstance, SearchSchedule, SyntheticGate,
                          assemble_lmi, lmi_margin, maximize_L_S, quad_problem, validate_certificate)
from quadcert.rl import (ActorCritic, PpoConfig, actor_loss_and_grad, critic_loss_and_grad, gae,
                         gaussian_logprob, train)
from quadcert.sector import DomainBox, SectorBounds, estimate_sector_bounds
from quadcert.trajectory import S_CURVE, min_snap, snap_costs_on_grid

from oracles import oracle_rhs
from verdicts import record

S0 = DomainBox.symmetric((1.5, 0.2, 1.5, 0.2))
UNIT = DomainBox(np.array([-1.0]), np.array([1.0]))


@pytest.fixture(scope="module")
def quad_search():
    """Maximal (L, S) search from the stated initial point; ``(cert, reason)``."""
    try:
        L, S, cert = maximize_L_S(quad_problem(), 1.0, S0)
    except InitialInfeasibleError as exc:
        return None, str(exc)
    return cert, f"L* = {L:.5g}, radii {np.round(S.group_radii(), 4).tolist()}"


# --- 1 ----------------------------------------------------------------------------------

def test_c01_equilibrium_exactness():
    err = float(np.abs(dynamics_rhs(np.zeros(12), np.zeros(4), np.zeros(4))).max())
    record(1, err < 1e-12, f"max |rhs(0, 0, 0)| = {err:.3g}")


# --- 2 ----------------------------------------------------------------------------------

def test_c02_dynamics_oracle():
    rng = np.random.default_rng(2)
    N = 10_000
    s = rng.uniform(-1, 1, (N, 12)) * [3, 3, 3, 1, 1, math.pi, 3, 3, 3, 2, 2, 2]
    u = rng.uniform(-2, 2, (N, 4))
    a = rng.uniform(-0.1, 0.1, (N, 4))
    got = dynamics_rhs(s, u, a)
    ref = np.array([oracle_rhs(*row) for row in zip(s, u, a)])
    rel = float((np.abs(got - ref) / np.maximum(np.abs(ref), 1.0)).max())
    record(2, rel <= 1e-10, f"max relative deviation {rel:.3g} on {N} points")


# --- 3 ----------------------------------------------------------------------------------

def test_c03_lmi_structure():
    rng = np.random.default_rng(3)
    inst = LmiInstance(linearize(Quadcopter()).A_K, estimate_sector_bounds(S0, 1.0), 1.0)

    def draw():
        P = rng.standard_normal((12, 12))
        return P + P.T, rng.uniform(0, 1, (12, 16)), rng.uniform(0, 1, (4, 12))

    v1, v2 = draw(), draw()
    M1, M2 = assemble_lmi(inst, *v1), assemble_lmi(inst, *v2)
    shape_ok = M1.shape == (252, 252)
    sym_ok = np.array_equal(M1, M1.T) and np.array_equal(M2, M2.T)
    worst = 0.0
    for t in (0.25, -1.5, 3.0):
        Mt = assemble_lmi(inst, *[t * a + (1 - t) * b for a, b in zip(v1, v2)])
        expect = t * M1 + (1 - t) * M2
        worst = max(worst, float(np.abs(Mt - expect).max() / max(1.0, np.abs(expect).max())))

    # n = m = 1, variables ordered (s, chi, xi_s, xi_u)
    A, L = -0.7, 1.3
    lo, hi = np.array([[-0.4, 0.1]]), np.array([[0.6, 0.5]])
    p, l0, l1, g = 2.0, 0.3, 0.9, 0.25
    c = (lo + hi)[0] / 2
    a = np.maximum(np.abs(lo), np.abs(hi))[0] ** 2 - c ** 2
    hand = np.array([
        [2 * p * A + l0 * a[0] + L ** 2 * g, 0.0, p + l0 * c[0], p],
        [0.0, l1 * a[1] - g, 0.0, l1 * c[1]],
        [p + l0 * c[0], 0.0, -l0, 0.0],
        [p, l1 * c[1], 0.0, -l1],
    ])
    small = assemble_lmi(LmiInstance(np.array([[A]]), SectorBounds(lo, hi), L), [[p]], [[l0, l1]], [[g]])
    hand_err = float(np.abs(small - hand).max())
    ok = shape_ok and sym_ok and worst <= 1e-12 and hand_err <= 1e-12
    record(3, ok, f"shape {M1.shape}, exact symmetry {sym_ok}, affinity residual {worst:.2g}, "
                  f"hand 4x4 deviation {hand_err:.2g}")


# --- 4 ----------------------------------------------------------------------------------

@pytest.mark.slow
def test_c04_feasibility_search(quad_search):
    gate = SyntheticGate()
    Lg, _, gcert = maximize_L_S(gate, 1.0, UNIT, SearchSchedule(grow=(0,)))
    gate_err = abs(Lg - gate.threshold) / gate.threshold
    gate_ok = (gate_err <= 1e-3 and gcert.margin < -1e-7
               and np.linalg.eigvalsh(gcert.P)[0] > 0)
    cert, reason = quad_search
    if cert is None:
        # a rank-one static gain this small already destabilises the linearised loop,
        # so the requested range is out of reach for any sound certificate
        lin = linearize(Quadcopter())
        U, sv, Vt = np.linalg.svd(-np.linalg.solve(lin.A_K, lin.B0))
        D = 1.02 * np.outer(Vt[0], U[:, 0]) / sv[0]
        pole = np.linalg.eigvals(lin.A_K + lin.B0 @ D).real.max()
        quad_ok = False
        quad_msg = (f"quadcopter search did not start: {reason}; a gain of norm "
                    f"{np.linalg.norm(D, 2):.4f} puts a closed-loop pole at real part {pole:.3f}")
    else:
        replay = lmi_margin(quad_problem().instance(cert.L_star, cert.S_star), cert.P, cert.Lam, cert.gam)
        quad_ok = (0.6 <= cert.L_star <= 2.6 and cert.margin < -1e-7 and replay < 0
                   and np.linalg.eigvalsh(cert.P)[0] > 0)
        quad_msg = f"quadcopter {reason}, margin {cert.margin:.3g}"
    record(4, gate_ok and quad_ok,
           f"gate L* = {Lg:.6g} (rel. error {gate_err:.2g}, margin {gcert.margin:.2g}); {quad_msg}")


# --- 5 ----------------------------------------------------------------------------------

@pytest.mark.slow
def test_c05_lyapunov_validation(quad_search):
    cert, reason = quad_search
    if cert is None:
        record(5, False, f"no certificate to validate ({reason})")
    rep = validate_certificate(cert, trials=1000, seed=0)
    record(5, rep.fraction >= 0.99,
           f"{rep.fraction:.1%} of {rep.trials} runs decreasing and converged "
           f"(V non-increasing in {rep.decreasing.mean():.1%}, converged in {rep.converged.mean():.1%})")


# --- 6 ----------------------------------------------------------------------------------

def _random_architectures(rng, count=100):
    """Hidden layouts with 1 to 5 layers and widths up to 64.

    Most nets are small; the corner cases (single 64 layer, five 64 layers)
    are always included.
    """
    shapes = [(64,), (64,) * 5]
    while len(shapes) < count:
        depth = int(rng.integers(1, 6))
        shapes.append(tuple(int(w) for w in rng.integers(2, 65, depth)))
    return shapes


@pytest.mark.slow
def test_c06_lipschitz_sandwich():
    rng = np.random.default_rng(6)
    violations, conservative, gaps = [], 0, []
    for hidden in _random_architectures(rng):
        net = nn.init_mlp((12,) + hidden + (4,), rng)
        lower = nn.lipschitz_sampled_lower(net, n_samples=2000, seed=int(rng.integers(1 << 30))).value
        sdp = nn.lipschitz_sdp(net)
        spec = nn.lipschitz_spectral_product(net).value
        conservative += sdp.conservative
        gaps.append(sdp.value / spec)
        if not (lower <= sdp.value <= spec + 1e-6):
            violations.append((hidden, lower, sdp.value, spec))
    single = []
    for _ in range(20):
        W = rng.standard_normal((int(rng.integers(1, 65)), int(rng.integers(1, 65))))
        net = nn.Mlp((nn.Layer(W, np.zeros(W.shape[0]), "none"),))
        single.append(abs(nn.lipschitz_sdp(net).value - nn.lipschitz_spectral_product(net).value))
    ok = not violations and max(single) <= 1e-6
    record(6, ok, f"{len(violations)} sandwich violations on 100 nets ({conservative} fell back to the "
                  f"spectral bound, median sdp/spectral {np.median(gaps):.3f}); "
                  f"single-layer max |sdp - spectral| {max(single):.2g}")


# --- 7 ----------------------------------------------------------------------------------

def test_c07_scaling_enforcement():
    rng = np.random.default_rng(7)
    base = nn.init_mlp((12,) + (64,) * 5 + (4,), rng)
    net = nn.scale_last_layer(base, 3.1519 / nn.lipschitz_sdp(base).value)
    before = nn.lipschitz_sdp(net).value
    scaled, est, c = nn.scale_final_layer(net, 1.2613)
    x = rng.standard_normal((200, 12))
    y0, y1 = nn.forward(net, x), nn.forward(scaled, x)
    dev = float(np.abs(y1 - c * y0).max())
    ok = abs(c - 0.4) <= 1e-12 and est.value < 1.2613 and dev <= 1e-12
    record(7, ok, f"estimate {before:.5f} -> {est.value:.5f} with c = {c:g}; output scaling deviation {dev:.2g}")


# --- 8 ----------------------------------------------------------------------------------

def test_c08_gae_oracle():
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(100):
        r, v = rng.standard_normal(10), rng.standard_normal(10)
        boot, g, lam = rng.standard_normal(), rng.uniform(0.5, 0.999), rng.uniform(0.0, 1.0)
        adv, _ = gae(r, v, boot, g, lam)
        delta = r + g * np.append(v[1:], boot) - v
        brute = np.array([sum((g * lam) ** k * delta[t + k] for k in range(10 - t)) for t in range(10)])
        worst = max(worst, float(np.abs(adv - brute).max()))
    record(8, worst <= 1e-10, f"max deviation {worst:.2g} over 100 rollouts of 10 steps")


# --- 9 ----------------------------------------------------------------------------------

def _worst_fd_mismatch(loss_fn, params, grads, rng, per_tensor=10, h=1e-5):
    worst = 0.0
    for k, (p, g) in enumerate(zip(params, grads)):
        for idx in rng.choice(p.size, size=min(per_tensor, p.size), replace=False):
            plus = [q.copy() for q in params]
            minus = [q.copy() for q in params]
            plus[k].flat[idx] += h
            minus[k].flat[idx] -= h
            fd = (loss_fn(plus) - loss_fn(minus)) / (2 * h)
            an = g.flat[idx]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    return worst


def test_c09_gradient_checks():
    rng = np.random.default_rng(9)
    cfg = PpoConfig(actor_hidden=(8, 6), critic_hidden=(8, 6), horizon=64, minibatch=64,
                    logvar_init=-2.0, logvar_max=0.0)
    ac = ActorCritic.init(cfg, rng)
    ac = ac.with_actor_params([p + 0.3 * rng.standard_normal(p.shape) for p in ac.actor_params()])
    s = rng.standard_normal((32, 12))
    mean, logvar, _, _ = ac.policy(s)
    u = mean + rng.standard_normal(mean.shape) * np.exp(0.5 * logvar)
    old = gaussian_logprob(u, mean, logvar) + 0.05 * rng.standard_normal(32)
    adv = rng.standard_normal(32)
    _, agrads, _ = actor_loss_and_grad(ac, s, u, old, adv, 0.2, 0.4)
    actor_loss = lambda ps: actor_loss_and_grad(ac.with_actor_params(ps), s, u, old, adv, 0.2, 0.4)[0]
    a_err = _worst_fd_mismatch(actor_loss, ac.actor_params(), agrads, rng)

    critic = nn.init_mlp((12, 8, 6, 1), rng)
    targets = rng.standard_normal(32)
    _, cgrads = critic_loss_and_grad(critic, s, targets)
    critic_loss = lambda ps: critic_loss_and_grad(critic.with_params(ps), s, targets)[0]
    c_err = _worst_fd_mismatch(critic_loss, critic.params(), cgrads, rng)
    record(9, a_err <= 1e-4 and c_err <= 1e-4,
           f"worst relative mismatch actor {a_err:.2g}, critic {c_err:.2g}")


# --- 10 ---------------------------------------------------------------------------------

@pytest.mark.slow
def test_c10_learning_progress(quad_search, tmp_path):
    cfg = replace(PpoConfig(), iterations=200)
    ac, rows = train(cfg, curve_path=tmp_path / "curve.csv")
    reward = np.array([r[1] for r in rows])
    q = len(reward) // 4
    first, last = float(reward[:q].mean()), float(reward[-q:].mean())
    progress = last > first
    msg = f"mean reward first quartile {first:.4f}, last quartile {last:.4f}"

    cert, reason = quad_search
    if cert is None:
        record(10, False, f"{msg}; no certified L* to scale the actor to ({reason})")
    scaled, est, c = nn.scale_final_layer(ac.mean_net, cert.L_star)
    pairs = compare_time_to_5pct(scaled, range(10))
    wins = int(np.sum(pairs[:, 1] < pairs[:, 0]))
    record(10, progress and est.value <= cert.L_star and wins >= 7,
           f"{msg}; actor scaled by {c:.4g} to estimate {est.value:.4g} <= L* {cert.L_star:.4g}; "
           f"combined faster on {wins}/10 seeds")


# --- 11 ---------------------------------------------------------------------------------

def test_c11_minimum_snap():
    wps = list(S_CURVE)
    traj = min_snap(wps)
    interp = max(float(np.abs(traj.derivative(w.t) - w.position).max()) for w in wps)
    # evaluate both neighbouring polynomials exactly at each interior knot
    jump = 0.0
    for k in range(1, len(traj.knots) - 1):
        left = type(traj)(traj.knots[k - 1:k + 1], traj.coeffs[k - 1:k])
        right = type(traj)(traj.knots[k:k + 2], traj.coeffs[k:k + 1])
        for order in range(5):
            a = left.derivative(traj.knots[k], order)
            b = right.derivative(traj.knots[k], order)
            jump = max(jump, float(np.abs(a - b).max()))
    snap, cubic = snap_costs_on_grid(wps)
    record(11, interp <= 1e-6 and jump < 1e-6 and snap < cubic,
           f"interpolation error {interp:.2g}, C4 residual {jump:.2g}, "
           f"snap cost {snap:.4g} vs natural cubic {cubic:.4g}")
