"""Minimum-snap polynomial reference trajectories through timed waypoints."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from math import factorial

import numpy as np
from scipy.interpolate import CubicSpline

DEG = 7
N_COEFF = DEG + 1
SNAP = 4


class SingularTimingError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class TimedWaypoint:
    position: tuple
    t: float


def _check_waypoints(waypoints):
    if len(waypoints) < 2:
        raise ValueError("need at least two waypoints")
    P = np.array([np.asarray(w.position, float) for w in waypoints])
    t = np.array([float(w.t) for w in waypoints])
    if P.shape[1] != 3 or not np.all(np.isfinite(P)) or not np.all(np.isfinite(t)):
        raise ValueError("waypoints need finite 3-D positions and times")
    if np.any(np.diff(t) <= 0):
        raise SingularTimingError("waypoint times must be strictly increasing")
    return P, t


def _deriv_row(r, tau):
    """Coefficients mapping ``c`` to the ``r``-th tau-derivative of ``sum c_i tau^i``."""
    row = np.zeros(N_COEFF)
    for i in range(r, N_COEFF):
        row[i] = factorial(i) / factorial(i - r) * tau ** (i - r)
    return row


def _snap_hessian():
    """``H`` with ``c^T H c = int_0^1 (d^4 p / d tau^4)^2 d tau``."""
    H = np.zeros((N_COEFF, N_COEFF))
    for i in range(SNAP, N_COEFF):
        for j in range(SNAP, N_COEFF):
            ci = factorial(i) / factorial(i - SNAP)
            cj = factorial(j) / factorial(j - SNAP)
            H[i, j] = ci * cj / (i + j - 2 * SNAP + 1)
    return H


@dataclass(frozen=True, eq=False)
class PolyTrajectory:
    """Piecewise degree-7 polynomials on normalised segment time.

    ``coeffs[k, :, a]`` holds segment ``k``'s coefficients for axis ``a``
    in powers of ``tau = (t - knots[k]) / (knots[k+1] - knots[k])``.
    """

    knots: np.ndarray
    coeffs: np.ndarray

    @property
    def t0(self) -> float:
        return float(self.knots[0])

    @property
    def t1(self) -> float:
        return float(self.knots[-1])

    def derivative(self, t, order: int = 0) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if np.any(t < self.t0 - 1e-12) or np.any(t > self.t1 + 1e-12):
            raise ValueError(f"time outside [{self.t0}, {self.t1}]")
        k = np.clip(np.searchsorted(self.knots, t, side="right") - 1, 0, len(self.knots) - 2)
        T = self.knots[k + 1] - self.knots[k]
        tau = (t - self.knots[k]) / T
        powers = np.stack([_deriv_row(order, x) for x in np.atleast_1d(tau)])
        out = np.einsum("ni,nia->na", powers, self.coeffs[np.atleast_1d(k)])
        out = out / np.atleast_1d(T)[:, None] ** order
        return out.reshape(t.shape + (3,))

    def snap_cost(self) -> float:
        """Exact ``int ||d^4 p / dt^4||^2 dt`` summed over axes."""
        H = _snap_hessian()
        T = np.diff(self.knots)
        return float(sum(np.trace(c.T @ H @ c) / T[k] ** (2 * SNAP - 1)
                         for k, c in enumerate(self.coeffs)))


def _constraints(t):
    """Equality constraints ``A c = b`` on the stacked segment coefficients of one axis.

    Returns ``A`` and, per row, the waypoint index its right-hand side takes
    (``-1`` for a zero right-hand side).
    """
    M = len(t) - 1
    T = np.diff(t)
    nv = M * N_COEFF
    rows, rhs_idx = [], []

    def row(k, r, tau):
        a = np.zeros(nv)
        a[k * N_COEFF:(k + 1) * N_COEFF] = _deriv_row(r, tau) / T[k] ** r
        return a
    for k in range(M):
        rows += [row(k, 0, 0.0), row(k, 0, 1.0)]
        rhs_idx += [k, k + 1]
    for r in range(1, SNAP):
        rows += [row(0, r, 0.0), row(M - 1, r, 1.0)]
        rhs_idx += [-1, -1]
    for k in range(M - 1):
        for r in range(1, SNAP + 1):
            rows.append(row(k, r, 1.0) - row(k + 1, r, 0.0))
            rhs_idx.append(-1)
    return np.array(rows), rhs_idx


def min_snap(waypoints) -> PolyTrajectory:
    """Minimum-snap trajectory through ``waypoints``, solved per axis via KKT.

    Endpoints are at rest (zero velocity, acceleration and jerk); interior
    knots carry continuity of derivatives one through four.
    """
    P, t = _check_waypoints(waypoints)
    M = len(t) - 1
    T = np.diff(t)
    nv = M * N_COEFF
    H0 = _snap_hessian()
    H = np.zeros((nv, nv))
    for k in range(M):
        sl = slice(k * N_COEFF, (k + 1) * N_COEFF)
        H[sl, sl] = H0 / T[k] ** (2 * SNAP - 1)

    A, rhs_idx = _constraints(t)
    nc = A.shape[0]
    # equilibrate: scaling the objective and each constraint row leaves the
    # minimiser unchanged but keeps the condition number meaningful
    H = H / max(np.abs(H).max(), 1e-300)
    row_scale = 1.0 / np.abs(A).max(axis=1)
    A = A * row_scale[:, None]
    K = np.block([[2 * H, A.T], [A, np.zeros((nc, nc))]])
    B = np.zeros((nv + nc, 3))
    for i, w in enumerate(rhs_idx):
        if w >= 0:
            B[nv + i] = P[w] * row_scale[i]
    if np.linalg.cond(K) > 1e14:
        raise SingularTimingError("minimum-snap KKT system is singular")
    sol = np.linalg.solve(K, B)
    return PolyTrajectory(t.copy(), sol[:nv].reshape(M, N_COEFF, 3))


def sample(traj: PolyTrajectory, t):
    """``(pos, vel, acc, psi_d)`` at time(s) ``t``; the heading reference is zero."""
    t = np.asarray(t, dtype=float)
    return (traj.derivative(t, 0), traj.derivative(t, 1), traj.derivative(t, 2), np.zeros(t.shape))


def discrete_snap_cost(pos, dt: float) -> float:
    """Snap cost of a uniformly sampled path from fourth finite differences."""
    pos = np.asarray(pos, dtype=float)
    d4 = np.diff(pos, n=4, axis=0) / dt ** 4
    return float(np.sum(d4 ** 2) * dt)


def cubic_spline_baseline(waypoints) -> CubicSpline:
    P, t = _check_waypoints(waypoints)
    return CubicSpline(t, P, axis=0, bc_type="natural")


def snap_costs_on_grid(waypoints, dt: float = 0.01):
    """Grid snap costs ``(min_snap, natural_cubic)`` under the same finite-difference functional."""
    traj = min_snap(waypoints)
    grid = np.linspace(traj.t0, traj.t1, int(round((traj.t1 - traj.t0) / dt)) + 1)
    h = grid[1] - grid[0]
    return (discrete_snap_cost(traj.derivative(grid), h),
            discrete_snap_cost(cubic_spline_baseline(waypoints)(grid), h))


def next_sample_reference(traj: PolyTrajectory, dt: float):
    """Reference function for tracking: the planner position one sample ahead, held at the end."""
    def ref(t):
        tn = min(t + dt, traj.t1)
        return np.append(traj.derivative(tn), 0.0)
    return ref


def read_waypoints_csv(path) -> list:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames is None or [f.strip() for f in rd.fieldnames] != ["x", "y", "z", "t"]:
            raise ValueError(f"{path}: expected header x,y,z,t")
        out = [TimedWaypoint((float(r["x"]), float(r["y"]), float(r["z"])), float(r["t"])) for r in rd]
    _check_waypoints(out)
    return out


def write_waypoints_csv(waypoints, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "z", "t"])
        for wp in waypoints:
            w.writerow([*("%.9g" % v for v in wp.position), "%.9g" % wp.t])


def write_sampled_csv(traj: PolyTrajectory, path, dt: float = 0.01) -> None:
    grid = np.linspace(traj.t0, traj.t1, int(round((traj.t1 - traj.t0) / dt)) + 1)
    pos, vel, acc, psi = sample(traj, grid)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "x", "y", "z", "vx", "vy", "vz", "ax", "ay", "az", "psi"])
        for k, tk in enumerate(grid):
            w.writerow(["%.9g" % v for v in (tk, *pos[k], *vel[k], *acc[k], psi[k])])


S_CURVE = (
    TimedWaypoint((0.0, 0.0, 0.0), 0.0),
    TimedWaypoint((3.0, 3.0, 0.0), 5.0),
    TimedWaypoint((6.0, 0.0, 0.0), 9.0),
    TimedWaypoint((9.0, -3.0, 0.0), 13.0),
    TimedWaypoint((12.0, 0.0, 0.0), 18.0),
)
