"""Robust-stability LMI: assembly, feasibility, maximal (L, S) search and certificates.

Decision variables are the Lyapunov matrix ``P``, sector multipliers
``Lam`` (stored as an ``n x (n+m)`` array, entry ``[i, j]`` pairs with the
Jacobian entry ``d zeta_i / d w_j``) and Lipschitz multipliers ``gam``
(``m x n``, entry ``[i, j]`` pairs with ``d u_i / d s_j``).

Block layout, with ``xi`` ordered i-major (``(i, j) -> i*(n+m) + j``) and
``chi`` ordered ``(i, j) -> i*n + j``::

    [ V           0                 *    ]
    [ 0           M_chi - diag(gam) *    ]  <  0
    [ N_s^T+R^T P N_chi^T           -diag(Lam) ]
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import cvxpy as cp
import numpy as np
import scipy.linalg as sla

from .dynamics import AlphaBounds, Quadcopter, simulate, zero_policy, UniformAlpha
from .sector import (DomainBox, GridSpec, NpvSystem, SectorBounds, estimate_sector_bounds,
                     quad_npv_system)

log = logging.getLogger(__name__)

EPS_MARGIN = 1e-7
EPS_P = 1e-8
CERT_VERSION = 1


class DimensionError(ValueError):
    pass


class SolverError(RuntimeError):
    """The conic solver did not converge (distinct from infeasibility)."""


class InitialInfeasibleError(RuntimeError):
    """The search starting point (L0, S0) is not certified."""


@dataclass(frozen=True)
class LmiInstance:
    A_K: np.ndarray
    sector: SectorBounds
    L: float

    def __post_init__(self):
        A = np.asarray(self.A_K, dtype=float)
        n = A.shape[0]
        if A.shape != (n, n):
            raise DimensionError("A_K must be square")
        if self.sector.lower.shape[0] != n or self.sector.lower.shape[1] <= n:
            raise DimensionError(f"sector bounds of shape {self.sector.lower.shape} "
                                 f"do not match n = {n}")
        if self.L < 0:
            raise ValueError("L must be non-negative")
        object.__setattr__(self, "A_K", A)

    @property
    def n(self) -> int:
        return self.A_K.shape[0]

    @property
    def m(self) -> int:
        return self.sector.lower.shape[1] - self.n

    @property
    def size(self) -> int:
        n, m = self.n, self.m
        return n + m * n + n * (n + m)

    def coefficients(self):
        """``(c, a)`` with ``c`` the sector midpoints and ``a = cbar^2 - c^2``."""
        lo, hi = self.sector.lower, self.sector.upper
        c = 0.5 * (lo + hi)
        cbar = np.maximum(np.abs(lo), np.abs(hi))
        return c, cbar ** 2 - c ** 2

    def structure(self):
        """Constant selector matrices shared by the numeric and symbolic assembly."""
        n, m = self.n, self.m
        k = n + m
        Q = np.kron(np.eye(m), np.ones((1, n)))                  # u = Q chi
        R = np.kron(np.eye(n), np.ones((1, k)))                  # zeta = R xi
        sel = np.zeros((n * k, k))                               # xi_(i,j) -> w_j
        sel[np.arange(n * k), np.tile(np.arange(k), n)] = 1.0
        S_s = sel[:, :n]                                         # w_j = s_j
        S_u = sel[:, n:] @ Q                                     # w_(n+j) = (Q chi)_j
        return Q, R, S_s, S_u


def _check_variables(inst: LmiInstance, P, Lam, gam):
    n, m = inst.n, inst.m
    if np.shape(P) != (n, n) or np.shape(Lam) != (n, n + m) or np.shape(gam) != (m, n):
        raise DimensionError(f"expected P {(n, n)}, Lam {(n, n + m)}, gam {(m, n)}; got "
                             f"{np.shape(P)}, {np.shape(Lam)}, {np.shape(gam)}")


def assemble_lmi(inst: LmiInstance, P, Lam, gam) -> np.ndarray:
    """Numeric LMI matrix for given multipliers (exactly symmetric)."""
    P, Lam, gam = (np.asarray(v, dtype=float) for v in (P, Lam, gam))
    _check_variables(inst, P, Lam, gam)
    n, m = inst.n, inst.m
    A = inst.A_K
    c, a = inst.coefficients()
    Q, R, S_s, S_u = inst.structure()
    P = 0.5 * (P + P.T)

    wa = Lam * a
    V = (np.diag(wa[:, :n].sum(axis=0)) + inst.L ** 2 * np.diag(gam.sum(axis=0))
         + P @ A + A.T @ P)
    Mchi = Q.T @ np.diag(wa[:, n:].sum(axis=0)) @ Q - np.diag(gam.ravel())
    lc = (Lam * c).ravel()
    C31 = lc[:, None] * S_s + R.T @ P
    C32 = lc[:, None] * S_u
    Mxi = -np.diag(Lam.ravel())

    M = np.block([[V, np.zeros((n, m * n)), C31.T],
                  [np.zeros((m * n, n)), Mchi, C32.T],
                  [C31, C32, Mxi]])
    # every block is symmetric or mirrored; enforce bitwise symmetry
    return np.triu(M) + np.triu(M, 1).T


def _assemble_expr(inst: LmiInstance, P, Lam, gam):
    """The same matrix as :func:`assemble_lmi` built from cvxpy variables."""
    n, m = inst.n, inst.m
    A = inst.A_K
    c, a = inst.coefficients()
    Q, R, S_s, S_u = inst.structure()

    wa = cp.multiply(Lam, a)
    V = (cp.diag(cp.sum(wa[:, :n], axis=0)) + inst.L ** 2 * cp.diag(cp.sum(gam, axis=0))
         + P @ A + A.T @ P)
    Mchi = Q.T @ cp.diag(cp.sum(wa[:, n:], axis=0)) @ Q - cp.diag(cp.vec(gam, order="C"))
    lc = cp.vec(cp.multiply(Lam, c), order="C")
    C31 = cp.diag(lc) @ S_s + R.T @ P
    C32 = cp.diag(lc) @ S_u
    Mxi = -cp.diag(cp.vec(Lam, order="C"))
    M = cp.bmat([[V, np.zeros((n, m * n)), C31.T],
                 [np.zeros((m * n, n)), Mchi, C32.T],
                 [C31, C32, Mxi]])
    return 0.5 * (M + M.T)


@dataclass(frozen=True)
class FeasibilityResult:
    feasible: bool
    margin: float
    P: np.ndarray
    Lam: np.ndarray
    gam: np.ndarray
    t: float
    status: str


def lmi_margin(inst: LmiInstance, P, Lam, gam) -> float:
    return float(np.linalg.eigvalsh(assemble_lmi(inst, P, Lam, gam))[-1])


def check_feasible(inst: LmiInstance, solver: str = "CLARABEL", eps_margin: float = EPS_MARGIN,
                   eps_p: float = EPS_P, **solver_opts) -> FeasibilityResult:
    """Minimise ``t`` subject to ``M(P, Lam, gam) <= t I``.

    The matrix is homogeneous in the variables, so ``P >= I`` fixes the
    scale from below (it implies ``P >= eps_p I``) and ``t >= -1`` keeps the
    problem bounded.  An upper bound on ``P`` would be the wrong way round:
    certificates for this loop need multipliers many orders of magnitude
    above ``P`` and a capped ``P`` drives the solver to the trivial point.
    The reported margin is the largest eigenvalue of the numerically
    re-assembled matrix at the returned witness.
    """
    n, m = inst.n, inst.m
    P = cp.Variable((n, n), symmetric=True)
    Lam = cp.Variable((n, n + m), nonneg=True)
    gam = cp.Variable((m, n), nonneg=True)
    t = cp.Variable()
    M = _assemble_expr(inst, P, Lam, gam)
    cons = [M << t * np.eye(inst.size), P >> np.eye(n), t >= -1.0]
    prob = cp.Problem(cp.Minimize(t), cons)
    try:
        prob.solve(solver=solver, **solver_opts)
    except cp.error.SolverError as exc:
        raise SolverError(str(exc)) from exc
    if prob.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE) or P.value is None:
        raise SolverError(f"conic solver returned status {prob.status!r}")
    Pv = 0.5 * (P.value + P.value.T)
    Lv = np.maximum(Lam.value, 0.0)
    gv = np.maximum(gam.value, 0.0)
    margin = lmi_margin(inst, Pv, Lv, gv)
    p_min = float(np.linalg.eigvalsh(Pv)[0])
    feasible = margin < -eps_margin and p_min >= eps_p * (1 - 1e-6)
    return FeasibilityResult(feasible, margin, Pv, Lv, gv, float(t.value), prob.status)


@dataclass(frozen=True)
class Certificate:
    P: np.ndarray
    Lam: np.ndarray
    gam: np.ndarray
    K: np.ndarray
    L_star: float
    S_star: DomainBox
    margin: float
    config_hash: str = ""

    def __post_init__(self):
        if np.linalg.eigvalsh(self.P)[0] <= 0:
            raise ValueError("certificate P is not positive definite")
        if np.any(self.Lam < 0) or np.any(self.gam < 0):
            raise ValueError("certificate multipliers must be non-negative")
        if not self.margin < 0:
            raise ValueError("certificate margin must be negative")

    def sublevel(self) -> float:
        """Largest ``c`` with ``{s : s^T P s <= c}`` inside ``S_star``."""
        Pinv_diag = np.diag(np.linalg.inv(self.P))
        r = np.minimum(-self.S_star.lower, self.S_star.upper)
        return float(np.min(r ** 2 / Pinv_diag))

    def to_dict(self) -> dict:
        n = self.P.shape[0]
        return {
            "version": CERT_VERSION,
            "L_star": self.L_star,
            "S_lower": self.S_star.lower.tolist(),
            "S_upper": self.S_star.upper.tolist(),
            "S_groups": [list(g) for g in self.S_star.groups],
            "margin": self.margin,
            "P": self.P.ravel().tolist(),
            # k = i + j*n ordering of the multipliers
            "Lambda": self.Lam.ravel(order="F").tolist(),
            "gamma": self.gam.ravel().tolist(),
            "K": self.K.ravel().tolist(),
            "n": n,
            "m": self.gam.shape[0],
            "config_hash": self.config_hash,
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "Certificate":
        with open(path) as fh:
            d = json.load(fh)
        if d.get("version") != CERT_VERSION:
            raise ValueError(f"{path}: unsupported certificate version {d.get('version')!r}")
        n, m = d["n"], d["m"]
        S = DomainBox(np.array(d["S_lower"]), np.array(d["S_upper"]), tuple(map(tuple, d["S_groups"])))
        return cls(P=np.array(d["P"]).reshape(n, n),
                   Lam=np.array(d["Lambda"]).reshape(n, n + m, order="F"),
                   gam=np.array(d["gamma"]).reshape(m, n),
                   K=np.array(d["K"]).reshape(-1, n),
                   L_star=float(d["L_star"]), S_star=S, margin=float(d["margin"]),
                   config_hash=d.get("config_hash", ""))


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]


class CertificationProblem:
    """Feasibility oracle over (L, S) for a closed loop given as an NpvSystem."""

    def __init__(self, system: NpvSystem, grid: GridSpec = GridSpec(), K=None, **solver_opts):
        self.system = system
        self.grid = grid
        self.K = np.zeros((system.m, system.n)) if K is None else np.asarray(K)
        self.solver_opts = solver_opts

    def instance(self, L: float, S: DomainBox) -> LmiInstance:
        return LmiInstance(self.system.A_K, estimate_sector_bounds(S, L, self.system, self.grid), L)

    def check(self, L: float, S: DomainBox) -> FeasibilityResult:
        return check_feasible(self.instance(L, S), **self.solver_opts)


class SyntheticGate:
    """Scalar loop ``ds/dt = a s + zeta`` whose sector ``|dzeta/ds| <= L / 2`` grows with ``L``.

    The input column carries no sector, so the LMI is feasible exactly when
    ``L / 2 < -a``, i.e. the threshold is ``L = -2 a``.
    """

    def __init__(self, a: float = -1.0, **solver_opts):
        if not a < 0:
            raise ValueError("gate system needs a < 0")
        self.a = float(a)
        self.K = np.zeros((1, 1))
        self.solver_opts = solver_opts

    @property
    def threshold(self) -> float:
        return -2.0 * self.a

    def instance(self, L: float, S: DomainBox) -> LmiInstance:
        sector = SectorBounds(np.array([[-L / 2, 0.0]]), np.array([[L / 2, 0.0]]))
        return LmiInstance(np.array([[self.a]]), sector, L)

    def check(self, L: float, S: DomainBox) -> FeasibilityResult:
        return check_feasible(self.instance(L, S), **self.solver_opts)


def quad_problem(quad: Quadcopter = Quadcopter(), alpha: AlphaBounds = AlphaBounds(),
                 grid: GridSpec = GridSpec(), **solver_opts) -> CertificationProblem:
    from .dynamics import linearize
    return CertificationProblem(quad_npv_system(quad, alpha), grid, linearize(quad).K, **solver_opts)


@dataclass(frozen=True)
class SearchSchedule:
    """Round-robin growth over L and each domain group.

    ``grow`` selects the coordinates that are searched: index 0 is ``L``,
    index ``g + 1`` is domain group ``g``.
    """

    growth: float = 1.05
    tol: float = 1e-3
    max_checks: int = 400
    grow: Optional[tuple] = None

    def __post_init__(self):
        if self.growth < 1.0:
            raise ValueError("growth factor must be >= 1")


@dataclass
class SearchTrace:
    L: list = field(default_factory=list)
    radii: list = field(default_factory=list)
    feasible: list = field(default_factory=list)
    margin: list = field(default_factory=list)


def _certificate(problem, L, S, res: FeasibilityResult, chash="") -> Certificate:
    return Certificate(res.P, res.Lam, res.gam, problem.K, float(L), S, res.margin, chash)


def maximize_L_S(problem, L0: float, S0: DomainBox, schedule: SearchSchedule = SearchSchedule(),
                 trace: Optional[SearchTrace] = None, chash: str = ""):
    """Grow ``L`` and the domain group radii while the LMI stays feasible.

    Each coordinate is multiplied by ``1 + step`` in turn; a failed step is
    undone and that coordinate's step is halved.  Stops when every step is
    below ``schedule.tol`` and returns ``(L_star, S_star, certificate)``.
    """
    res = problem.check(L0, S0)
    if trace is not None:
        trace.L.append(L0); trace.radii.append(S0.group_radii()); trace.feasible.append(res.feasible)
        trace.margin.append(res.margin)
    if not res.feasible:
        raise InitialInfeasibleError(
            f"LMI infeasible at the initial point L0={L0:g}, S0 radii={S0.group_radii()} "
            f"(margin {res.margin:.3g}); shrink L0 or S0")
    L, S, best = float(L0), S0, res
    ncoord = 1 + len(S0.groups)
    grow = tuple(range(ncoord)) if schedule.grow is None else tuple(schedule.grow)
    steps = np.array([schedule.growth - 1.0 if k in grow else 0.0 for k in range(ncoord)])
    checks, k = 0, 0
    while np.any(steps >= schedule.tol) and checks < schedule.max_checks:
        idx = k % ncoord
        k += 1
        if steps[idx] < schedule.tol:
            continue
        if idx == 0:
            L_c, S_c = L * (1 + steps[0]), S
        else:
            f = np.ones(ncoord - 1)
            f[idx - 1] = 1 + steps[idx]
            L_c, S_c = L, S.scaled(f)
        try:
            r = problem.check(L_c, S_c)
            ok = r.feasible
        except (SolverError, ArithmeticError) as exc:
            log.info("candidate rejected: %s", exc)
            r, ok = None, False
        checks += 1
        if trace is not None:
            trace.L.append(L_c); trace.radii.append(S_c.group_radii()); trace.feasible.append(ok)
            trace.margin.append(r.margin if r is not None else math.nan)
        log.debug("check %d: L=%.5g radii=%s feasible=%s", checks, L_c, S_c.group_radii(), ok)
        if ok:
            L, S, best = L_c, S_c, r
        else:
            steps[idx] /= 2
    if checks >= schedule.max_checks:
        log.warning("search stopped after %d checks before reaching tolerance", checks)
    return L, S, _certificate(problem, L, S, best, chash)


def find_feasible_start(problem, L0: float, S0: DomainBox, shrink: float = 0.5,
                        max_halvings: int = 30):
    """Shrink ``(L0, S0)`` uniformly until the LMI becomes feasible."""
    L, S = float(L0), S0
    for _ in range(max_halvings + 1):
        try:
            if problem.check(L, S).feasible:
                return L, S
        except (SolverError, ArithmeticError):
            pass
        L, S = L * shrink, S.scaled(shrink)
    raise InitialInfeasibleError(f"no feasible point found after {max_halvings} reductions")


@dataclass(frozen=True)
class ValidationReport:
    trials: int
    decreasing: np.ndarray
    converged: np.ndarray
    initial_norm: np.ndarray
    terminal_norm: np.ndarray

    @property
    def fraction(self) -> float:
        if self.trials == 0:
            return float("nan")
        return float(np.mean(self.decreasing & self.converged))


def sample_sublevel(P, level: float, count: int, rng) -> np.ndarray:
    """Uniform samples of ``{s : s^T P s <= level}``."""
    n = P.shape[0]
    z = rng.standard_normal((count, n))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    z *= rng.uniform(size=(count, 1)) ** (1.0 / n)
    # s = sqrt(level) P^{-1/2} z
    Pmh = sla.fractional_matrix_power(P, -0.5).real
    return np.sqrt(level) * z @ Pmh.T


def validate_certificate(cert: Certificate, trials: int = 1000, seed: int = 0,
                         quad: Quadcopter = Quadcopter(), alpha: AlphaBounds = AlphaBounds(),
                         T: float = 60.0, dt: float = 0.01, slack: float = 1e-3,
                         shrink: float = 0.05) -> ValidationReport:
    """Simulate the nominal loop from the inscribed sublevel set of ``s^T P s``.

    A run passes when ``V`` never grows by more than ``slack * V`` in one
    step and the terminal norm is below ``shrink`` times the initial norm.
    """
    if trials == 0:
        e = np.zeros(0)
        return ValidationReport(0, e.astype(bool), e.astype(bool), e, e)
    rng = np.random.default_rng(seed)
    s0 = sample_sublevel(cert.P, cert.sublevel(), trials, rng)
    traj = simulate(zero_policy, s0, UniformAlpha(alpha, seed=seed + 1), T, dt, quad)
    X = traj.states                                          # (steps+1, trials, n)
    V = np.einsum("...i,ij,...j->...", X, cert.P, X)
    dV = V[1:] - V[:-1]
    decreasing = np.all(dV <= slack * V[:-1] + 1e-15, axis=0)
    n0 = np.linalg.norm(X[0], axis=-1)
    nT = np.linalg.norm(X[-1], axis=-1)
    converged = nT <= shrink * n0
    return ValidationReport(trials, decreasing, converged, n0, nT)
