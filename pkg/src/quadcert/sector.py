"""Nonlinearity/parameter-variation residual and sampled sector bounds on its Jacobian.

The residual is ``zeta(s, u, alpha) = f(s, u, alpha) - A_K s`` where ``f`` is the
closed loop with the nominal controller embedded and ``u`` is the learned
controller's contribution.  Bounds are elementwise intervals on
``d zeta_i / d (s, u)_j`` over a state box, the input box implied by a
Lipschitz bound, and the ``alpha`` box.
"""
from __future__ import annotations

import csv
import functools
import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .dynamics import AlphaBounds, Quadcopter, closed_loop_matrix, closed_loop_rhs

QUAD_GROUPS = ((0, 1, 2), (3, 4, 5), (6, 7, 8), (9, 10, 11))
GROUP_NAMES = ("position", "attitude", "velocity", "rate")


class SectorBoundError(ArithmeticError):
    """Non-finite Jacobian samples; the state domain must be shrunk."""

    def __init__(self, message, entries=()):
        super().__init__(message)
        self.entries = tuple(entries)


@dataclass(frozen=True)
class DomainBox:
    """Per-coordinate closed intervals of the state domain.

    ``groups`` partitions the coordinates into blocks that are scaled
    together (position, attitude, velocity, rate for the quadcopter).
    """

    lower: np.ndarray
    upper: np.ndarray
    groups: tuple = ()

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).copy()
        hi = np.asarray(self.upper, dtype=float).copy()
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lower/upper must be 1-D arrays of equal length")
        if np.any(lo > hi):
            raise ValueError("DomainBox lower bound exceeds upper bound")
        if np.any(lo > 0) or np.any(hi < 0):
            raise ValueError("DomainBox must contain the origin")
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        groups = tuple(tuple(int(i) for i in g) for g in self.groups) or (tuple(range(lo.size)),)
        object.__setattr__(self, "groups", groups)

    @classmethod
    def symmetric(cls, radii: Sequence[float], groups=QUAD_GROUPS) -> "DomainBox":
        """Box ``(-r_g, r_g)`` for every coordinate of group ``g``."""
        n = sum(len(g) for g in groups)
        hi = np.empty(n)
        for r, g in zip(radii, groups, strict=True):
            hi[list(g)] = r
        return cls(-hi, hi, groups)

    @property
    def n(self) -> int:
        return self.lower.size

    @property
    def radius(self) -> float:
        """Largest Euclidean norm attained on the box."""
        return float(np.sqrt(np.sum(np.maximum(self.lower ** 2, self.upper ** 2))))

    def group_radii(self) -> np.ndarray:
        return np.array([np.max(np.maximum(-self.lower[list(g)], self.upper[list(g)]))
                         for g in self.groups])

    def scaled(self, factors) -> "DomainBox":
        factors = np.broadcast_to(np.asarray(factors, dtype=float), (len(self.groups),))
        scale = np.empty(self.n)
        for f, g in zip(factors, self.groups):
            scale[list(g)] = f
        return DomainBox(self.lower * scale, self.upper * scale, self.groups)

    def contains(self, s, tol=0.0) -> np.ndarray:
        s = np.asarray(s)
        return np.all((s >= self.lower - tol) & (s <= self.upper + tol), axis=-1)


@dataclass(frozen=True)
class InputDomainBox:
    lower: np.ndarray
    upper: np.ndarray


@dataclass(frozen=True)
class SectorBounds:
    """Elementwise bounds ``lower <= J_zeta <= upper`` of shape ``n x (n+m)``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        if self.lower.shape != self.upper.shape or self.lower.ndim != 2:
            raise ValueError("sector bounds must be two matrices of equal shape")
        if np.any(self.lower > self.upper):
            raise ValueError("sector lower bound exceeds upper bound")

    @property
    def n(self) -> int:
        return self.lower.shape[0]

    @property
    def m(self) -> int:
        return self.lower.shape[1] - self.lower.shape[0]

    def contains(self, J, tol=0.0) -> np.ndarray:
        return (J >= self.lower - tol) & (J <= self.upper + tol)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("row", "col", "lower", "upper"))
            for i, j in itertools.product(range(self.lower.shape[0]), range(self.lower.shape[1])):
                w.writerow((i, j, repr(float(self.lower[i, j])), repr(float(self.upper[i, j]))))

    @classmethod
    def from_csv(cls, path) -> "SectorBounds":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        n = max(int(r["row"]) for r in rows) + 1
        k = max(int(r["col"]) for r in rows) + 1
        lo, hi = np.full((n, k), np.nan), np.full((n, k), np.nan)
        for r in rows:
            i, j = int(r["row"]), int(r["col"])
            lo[i, j], hi[i, j] = float(r["lower"]), float(r["upper"])
        if np.isnan(lo).any():
            raise ValueError(f"{path}: missing sector entries")
        return cls(lo, hi)


@dataclass(frozen=True)
class GridSpec:
    """Sampling controls for :func:`estimate_sector_bounds`."""

    points: int = 7
    fd_step: float = 1e-5
    inflation: float = 1.10
    delta: float = 1e-6
    n_probe: int = 6
    seed: int = 0
    chunk: int = 20000

    def __post_init__(self):
        if self.points < 2:
            raise ValueError("grid resolution must be at least 2 points per coordinate")


@dataclass(frozen=True)
class NpvSystem:
    """Closed loop ``f(s, u, alpha)`` (vectorised) together with ``A_K``.

    ``f`` must accept arrays with a leading batch dimension.
    """

    closed_loop: Callable
    A_K: np.ndarray
    m: int
    alpha_lower: np.ndarray
    alpha_upper: np.ndarray
    groups: tuple = field(default=())

    @property
    def n(self) -> int:
        return self.A_K.shape[0]

    @property
    def d(self) -> int:
        return np.asarray(self.alpha_lower).size

    def residual(self, s, u, alpha) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        return self.closed_loop(s, u, alpha) - s @ self.A_K.T


@functools.lru_cache(maxsize=8)
def quad_npv_system(quad: Quadcopter = Quadcopter(),
                    alpha: AlphaBounds = AlphaBounds()) -> NpvSystem:
    A_K = closed_loop_matrix(quad)
    A_K.flags.writeable = False
    return NpvSystem(
        closed_loop=lambda s, u, a: closed_loop_rhs(s, u, a, quad),
        A_K=A_K, m=4, alpha_lower=alpha.lo, alpha_upper=alpha.hi, groups=QUAD_GROUPS,
    )


def npv_residual(s, u_nn, alpha, system: Optional[NpvSystem] = None) -> np.ndarray:
    """``f(s, K s + u_nn, alpha) - A_K s`` for the quadcopter unless ``system`` is given."""
    system = system if system is not None else quad_npv_system()
    return system.residual(s, u_nn, alpha)


def input_domain(L: float, S: DomainBox, m: int = 4) -> InputDomainBox:
    """Box containing every ``u`` with ``||u||_2 <= L ||s||_2`` for some ``s`` in ``S``."""
    if L < 0:
        raise ValueError("Lipschitz bound must be non-negative")
    r = L * S.radius
    return InputDomainBox(np.full(m, -r), np.full(m, r))


def npv_jacobian(system: NpvSystem, s, u, alpha, h: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of the residual w.r.t. ``(s, u)``: shape ``(N, n, n+m)``."""
    s = np.atleast_2d(np.asarray(s, dtype=float))
    u = np.atleast_2d(np.asarray(u, dtype=float))
    alpha = np.atleast_2d(np.asarray(alpha, dtype=float))
    n, m = system.n, system.m
    w = np.concatenate([s, u], axis=1)
    N = w.shape[0]
    k = n + m
    # stack +h and -h perturbations for every column in one batch
    pert = np.concatenate([np.eye(k) * h, -np.eye(k) * h])          # (2k, k)
    W = (w[None, :, :] + pert[:, None, :]).reshape(-1, k)
    A = np.broadcast_to(alpha, (2 * k, N, alpha.shape[1])).reshape(-1, alpha.shape[1])
    Z = system.residual(W[:, :n], W[:, n:], A).reshape(2 * k, N, n)
    J = (Z[:k] - Z[k:]) / (2 * h)                                    # (k, N, n)
    return np.transpose(J, (1, 2, 0))


# coordinate classification used to build the per-row sampling grid
_NONE, _AFFINE, _NONLINEAR = 0, 1, 2


def _coordinate_kinds(system, lo, hi, spec: GridSpec) -> np.ndarray:
    """Classify how each Jacobian entry depends on each coordinate.

    Returns an int array ``(n, n+m, n+m+d)`` with 0 (no dependence),
    1 (affine) or 2 (nonlinear), decided by probing along each coordinate at
    random points of the domain.
    """
    n, m = system.n, system.m
    dim = lo.size
    rng = np.random.default_rng(spec.seed)
    probes = np.vstack([np.where((lo <= 0) & (hi >= 0), 0.0, (lo + hi) / 2),
                        rng.uniform(lo, hi, size=(spec.n_probe, dim))])
    kinds = np.zeros((n, n + m, dim), dtype=int)
    for k in range(dim):
        if hi[k] <= lo[k]:
            continue
        pts = np.repeat(probes[:, None, :], 5, axis=1)
        pts[:, :, k] = np.linspace(lo[k], hi[k], 5)
        flat = pts.reshape(-1, dim)
        J = npv_jacobian(system, flat[:, :n], flat[:, n:n + m], flat[:, n + m:], spec.fd_step)
        J = J.reshape(len(probes), 5, n, n + m)
        if not np.all(np.isfinite(J)):
            bad = np.argwhere(~np.all(np.isfinite(J), axis=(0, 1)))
            raise SectorBoundError("non-finite Jacobian samples while probing; shrink the state domain",
                                   [tuple(b) for b in bad])
        tol = 1e-6 * (1.0 + np.max(np.abs(J), axis=(0, 1)))
        spread = np.max(J, axis=1) - np.min(J, axis=1)                 # (P, n, n+m)
        depends = np.any(spread > tol, axis=0)
        second = J[:, :-2] - 2 * J[:, 1:-1] + J[:, 2:]
        curved = np.any(np.abs(second) > tol, axis=(0, 1))
        kinds[:, :, k] = np.where(depends, np.where(curved, _NONLINEAR, _AFFINE), _NONE)
    return kinds


def _axis_values(kind, lo, hi, points, is_alpha) -> np.ndarray:
    centre = 0.0 if lo <= 0.0 <= hi else 0.5 * (lo + hi)
    if hi <= lo or kind == _NONE:
        return np.array([centre])
    if kind == _AFFINE:
        return np.array([lo, centre, hi]) if is_alpha else np.array([lo, hi])
    return np.unique(np.append(np.linspace(lo, hi, points), centre))


def estimate_sector_bounds(S: DomainBox, L: float, system: Optional[NpvSystem] = None,
                           grid: GridSpec = GridSpec(), alpha_box=None) -> SectorBounds:
    """Sampled sector bounds on the residual Jacobian over ``S x U(L, S) x alpha``.

    Coordinates an entry depends on nonlinearly are swept with
    ``grid.points`` values; affine coordinates only at their endpoints, which
    is exact for the extremes of a multi-affine dependence.  ``alpha`` takes
    its endpoints plus centre.  The sampled ranges are widened about their
    midpoint by ``grid.inflation`` and padded by ``grid.delta``.
    """
    system = system if system is not None else quad_npv_system()
    n, m = system.n, system.m
    if S.n != n:
        raise ValueError(f"domain has {S.n} coordinates, system has {n}")
    U = input_domain(L, S, m)
    if alpha_box is None:
        a_lo, a_hi = np.asarray(system.alpha_lower, float), np.asarray(system.alpha_upper, float)
    else:
        a_lo, a_hi = (np.asarray(v, float) for v in alpha_box)
    lo = np.concatenate([S.lower, U.lower, a_lo])
    hi = np.concatenate([S.upper, U.upper, a_hi])
    is_alpha = np.arange(lo.size) >= n + m

    kinds = _coordinate_kinds(system, lo, hi, grid)
    J_lo = np.full((n, n + m), np.inf)
    J_hi = np.full((n, n + m), -np.inf)
    bad = []
    for i in range(n):
        row_kind = kinds[i].max(axis=0)
        axes = [_axis_values(row_kind[k], lo[k], hi[k], grid.points, is_alpha[k])
                for k in range(lo.size)]
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, lo.size)
        for start in range(0, mesh.shape[0], grid.chunk):
            pts = mesh[start:start + grid.chunk]
            J = npv_jacobian(system, pts[:, :n], pts[:, n:n + m], pts[:, n + m:], grid.fd_step)[:, i, :]
            finite = np.all(np.isfinite(J), axis=0)
            if not finite.all():
                bad.extend((i, int(j)) for j in np.flatnonzero(~finite))
                continue
            J_lo[i] = np.minimum(J_lo[i], J.min(axis=0))
            J_hi[i] = np.maximum(J_hi[i], J.max(axis=0))
    if bad:
        raise SectorBoundError(f"non-finite Jacobian samples at {len(bad)} entries; "
                               "shrink the state domain", sorted(set(bad)))
    centre = 0.5 * (J_lo + J_hi)
    half = 0.5 * (J_hi - J_lo) * grid.inflation + grid.delta
    return SectorBounds(centre - half, centre + half)
