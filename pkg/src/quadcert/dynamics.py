"""Quadcopter rigid-body model, nominal cascade PD controller and fixed-step simulation.

State ordering used throughout the package::

    [x, y, z, phi, theta, psi, vx, vy, vz, p, q, r]

Positions and velocities are inertial, ``(p, q, r)`` are body rates.  The
closed-loop right-hand side embeds the nominal controller; the extra input
``u`` is the per-motor thrust increment commanded by a learned controller.
All array functions broadcast over leading batch dimensions.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

N_STATE = 12
N_INPUT = 4
N_ALPHA = 4

STATE_NAMES = ("x", "y", "z", "phi", "theta", "psi", "vx", "vy", "vz", "p", "q", "r")
CSV_HEADER = STATE_NAMES + ("u1", "u2", "u3", "u4", "a1", "a2", "a3", "a4",
                            "ref_x", "ref_y", "ref_z", "ref_psi")
CSV_HEADER = ("t",) + CSV_HEADER

# cos(theta) guard for the Euler-rate map
EPS_SING = 1e-3

SQRT2 = math.sqrt(2.0)


class SingularAttitudeError(ArithmeticError):
    """Pitch too close to +-pi/2 for the Euler-angle kinematics."""


class SimulationError(RuntimeError):
    """A rollout produced a singular attitude or a non-finite state."""

    def __init__(self, message, t=None, state=None):
        super().__init__(message)
        self.t = t
        self.state = state


@dataclass(frozen=True)
class QuadParams:
    """Physical parameters of the X-configuration airframe (SI units)."""

    Ixx: float = 2.9125e-2
    Iyy: float = 2.9125e-2
    Izz: float = 5.5225e-2
    g: float = 9.807
    m: float = 1.5
    l: float = 0.25554
    kd_over_kt: float = 0.06
    Dx: float = 0.25
    Dy: float = 0.25
    Dz: float = 0.25

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"QuadParams.{name} must be finite and > 0, got {value!r}")

    @property
    def hover_thrust(self) -> float:
        return self.m * self.g

    @property
    def inertia(self) -> np.ndarray:
        return np.array([self.Ixx, self.Iyy, self.Izz])

    @property
    def drag(self) -> np.ndarray:
        return np.array([self.Dx, self.Dy, self.Dz])

    def mixer(self) -> np.ndarray:
        """Map from motor thrusts to ``(T, tau_phi, tau_theta, tau_psi)``."""
        a = self.l / SQRT2
        b = self.kd_over_kt
        return np.array([
            [1.0, 1.0, 1.0, 1.0],
            [-a, -a, a, a],
            [-a, a, a, -a],
            [b, -b, b, -b],
        ])


@dataclass(frozen=True)
class NominalGains:
    Kx: float = 0.05
    Ky: float = 0.05
    Kz: float = 0.1
    Kphi: float = 0.1
    Ktheta: float = 0.1
    Kpsi: float = 0.1
    Kphi_dot: float = 0.01
    Ktheta_dot: float = 0.01
    Kpsi_dot: float = 0.1


@dataclass(frozen=True)
class AlphaBounds:
    """Box of admissible thrust/torque variations ``alpha``."""

    lower: tuple = (-0.05, -0.05, -0.05, -0.05)
    upper: tuple = (0.05, 0.05, 0.05, 0.05)

    def __post_init__(self):
        lo, hi = np.asarray(self.lower, float), np.asarray(self.upper, float)
        if lo.shape != (N_ALPHA,) or hi.shape != (N_ALPHA,):
            raise ValueError("alpha bounds must have four entries")
        if np.any(lo > hi):
            raise ValueError("alpha lower bound exceeds upper bound")
        if np.any(lo <= -1.0):
            raise ValueError("alpha lower bound must stay above -1 (thrust sign flip)")

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.lower, float)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.upper, float)

    def contains(self, alpha, tol=0.0) -> bool:
        alpha = np.asarray(alpha)
        return bool(np.all(alpha >= self.lo - tol) and np.all(alpha <= self.hi + tol))


class UniformAlpha:
    """Seeded per-step sampler of ``alpha`` uniform in an :class:`AlphaBounds` box."""

    def __init__(self, bounds: AlphaBounds = AlphaBounds(), seed=None):
        self.bounds = bounds
        self.rng = np.random.default_rng(seed)

    def __call__(self, shape=()) -> np.ndarray:
        return self.rng.uniform(self.bounds.lo, self.bounds.hi, size=tuple(shape) + (N_ALPHA,))


def zero_alpha(shape=()) -> np.ndarray:
    return np.zeros(tuple(shape) + (N_ALPHA,))


def zero_policy(e: np.ndarray) -> np.ndarray:
    return np.zeros(e.shape[:-1] + (N_INPUT,))


# ---------------------------------------------------------------------------
# Kinematics and rigid-body dynamics


def rotation_matrix(att) -> np.ndarray:
    """Body-to-inertial rotation for roll-pitch-yaw angles ``(phi, theta, psi)``."""
    att = np.asarray(att, dtype=float)
    sf, cf = np.sin(att[..., 0]), np.cos(att[..., 0])
    st, ct = np.sin(att[..., 1]), np.cos(att[..., 1])
    sp, cp = np.sin(att[..., 2]), np.cos(att[..., 2])
    R = np.empty(att.shape[:-1] + (3, 3))
    R[..., 0, 0] = cp * ct
    R[..., 0, 1] = cp * st * sf - sp * cf
    R[..., 0, 2] = cp * st * cf + sp * sf
    R[..., 1, 0] = sp * ct
    R[..., 1, 1] = sp * st * sf + cp * cf
    R[..., 1, 2] = sp * st * cf - cp * sf
    R[..., 2, 0] = -st
    R[..., 2, 1] = ct * sf
    R[..., 2, 2] = ct * cf
    return R


def _check_pitch(theta) -> np.ndarray:
    ct = np.cos(theta)
    if np.any(np.abs(ct) <= EPS_SING):
        raise SingularAttitudeError(
            f"|cos(theta)| <= {EPS_SING}: Euler-angle kinematics are singular")
    return ct


def euler_rates(att, rate) -> np.ndarray:
    """Euler-angle rates ``(phi_dot, theta_dot, psi_dot)`` from body rates."""
    phi, theta = att[..., 0], att[..., 1]
    p, q, r = rate[..., 0], rate[..., 1], rate[..., 2]
    ct = _check_pitch(theta)
    sf, cf = np.sin(phi), np.cos(phi)
    tt = np.sin(theta) / ct
    return np.stack([
        p + sf * tt * q + cf * tt * r,
        cf * q - sf * r,
        (sf * q + cf * r) / ct,
    ], axis=-1)


def rigid_body_rhs(s, thrust, torque, params: QuadParams = QuadParams()) -> np.ndarray:
    """Open-loop derivative for a given total thrust and body torques."""
    s = np.asarray(s, dtype=float)
    thrust = np.asarray(thrust, dtype=float)
    torque = np.asarray(torque, dtype=float)
    batch = np.broadcast_shapes(s.shape[:-1], thrust.shape, torque.shape[:-1])
    s = np.broadcast_to(s, batch + (N_STATE,))
    att, vel, rate = s[..., 3:6], s[..., 6:9], s[..., 9:12]

    att_dot = euler_rates(att, rate)
    sf, cf = np.sin(att[..., 0]), np.cos(att[..., 0])
    st, ct = np.sin(att[..., 1]), np.cos(att[..., 1])
    sp, cp = np.sin(att[..., 2]), np.cos(att[..., 2])
    a_t = thrust / params.m
    acc = np.stack([
        a_t * (cp * st * cf + sp * sf) - params.Dx / params.m * vel[..., 0],
        a_t * (sp * st * cf - cp * sf) - params.Dy / params.m * vel[..., 1],
        -params.g + a_t * (ct * cf) - params.Dz / params.m * vel[..., 2],
    ], axis=-1)

    p, q, r = rate[..., 0], rate[..., 1], rate[..., 2]
    Ixx, Iyy, Izz = params.Ixx, params.Iyy, params.Izz
    rate_dot = np.stack([
        ((Iyy - Izz) * q * r + torque[..., 0]) / Ixx,
        ((Izz - Ixx) * p * r + torque[..., 1]) / Iyy,
        ((Ixx - Iyy) * p * q + torque[..., 2]) / Izz,
    ], axis=-1)
    return np.concatenate([vel, att_dot, acc, rate_dot], axis=-1)


# ---------------------------------------------------------------------------
# Nominal controller and allocation


def nominal_control(e, gains: NominalGains = NominalGains(), params: QuadParams = QuadParams()):
    """Cascade P (position) / PD (attitude) law in error coordinates.

    ``e`` is the state minus the reference ``(x_d, y_d, z_d, psi_d)``, so a
    reference at the origin gives plain state feedback.  Returns the tuple
    ``(T_d, tau_phi_d, tau_theta_d, tau_psi_d)``; ``T_d`` includes ``m g``.
    """
    e = np.asarray(e, dtype=float)
    k = gains
    x, y, z = e[..., 0], e[..., 1], e[..., 2]
    phi, theta, psi = e[..., 3], e[..., 4], e[..., 5]
    vx, vy = e[..., 6], e[..., 7]
    phi_dot, theta_dot, psi_dot = np.moveaxis(euler_rates(e[..., 3:6], e[..., 9:12]), -1, 0)

    T_d = params.hover_thrust - k.Kz * z
    tau_phi = k.Kphi * (k.Ky * y - phi) + k.Kphi_dot * (k.Ky * vy - phi_dot)
    tau_theta = -k.Ktheta * (k.Kx * x + theta) - k.Ktheta_dot * (k.Kx * vx + theta_dot)
    tau_psi = -k.Kpsi * psi - k.Kpsi_dot * psi_dot
    return T_d, tau_phi, tau_theta, tau_psi


def _mixer_inverse(params: QuadParams) -> np.ndarray:
    M = params.mixer()
    if np.linalg.cond(M) > 1e12:
        raise np.linalg.LinAlgError("mixer matrix is singular for this geometry")
    return np.linalg.inv(M)


def allocate(T_d, tau_phi, tau_theta, tau_psi, params: QuadParams = QuadParams()) -> np.ndarray:
    """Motor thrusts realising the requested thrust and torques."""
    w = np.stack(np.broadcast_arrays(*map(np.asarray, (T_d, tau_phi, tau_theta, tau_psi))), axis=-1)
    return w @ _mixer_inverse(params).T


# ---------------------------------------------------------------------------
# Closed loop


@dataclass(frozen=True)
class Quadcopter:
    """Airframe + nominal controller bundle used by every closed-loop routine.

    ``thrust_clamp`` optionally saturates each motor thrust to ``(lo, hi)``
    newtons; it is off by default.
    """

    params: QuadParams = field(default_factory=QuadParams)
    gains: NominalGains = field(default_factory=NominalGains)
    thrust_clamp: Optional[tuple] = None
    validate: bool = field(default=True, compare=False, repr=False)

    def __post_init__(self):
        if not self.validate:
            return
        eig = np.linalg.eigvals(closed_loop_matrix(self))
        if not np.all(eig.real < 0):
            raise ValueError(f"nominal gains do not stabilise the linearisation: "
                             f"max Re(eig A_K) = {eig.real.max():.3g}")

    def motor_thrusts(self, e, u) -> np.ndarray:
        U = allocate(*nominal_control(e, self.gains, self.params), params=self.params)
        U = U + np.asarray(u, dtype=float)
        if self.thrust_clamp is not None:
            U = np.clip(U, *self.thrust_clamp)
        return U


def reference_state(ref) -> np.ndarray:
    """12-vector offset for a reference ``(x_d, y_d, z_d, psi_d)``."""
    ref = np.asarray(ref, dtype=float)
    out = np.zeros(ref.shape[:-1] + (N_STATE,))
    out[..., 0:3] = ref[..., 0:3]
    out[..., 5] = ref[..., 3]
    return out


def closed_loop_rhs(s, u, alpha, quad: Quadcopter, ref=None) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    e = s if ref is None else s - reference_state(ref)
    U = quad.motor_thrusts(e, u)
    w = U @ quad.params.mixer().T
    w = w * (1.0 + alpha)
    return rigid_body_rhs(s, w[..., 0], w[..., 1:4], quad.params)


def dynamics_rhs(s, u, alpha, params: QuadParams = QuadParams(),
                 gains: NominalGains = NominalGains()) -> np.ndarray:
    """Closed-loop derivative in shifted coordinates (reference at the origin).

    Thrust and torques come from the nominal law plus the motor increments
    ``u``; ``alpha`` scales the commanded thrust and the three torques.
    """
    return closed_loop_rhs(s, u, alpha, Quadcopter(params, gains, validate=False))


def step(s, u, alpha, dt: float, quad: Optional[Quadcopter] = None, ref=None) -> np.ndarray:
    """One explicit Euler step of the closed loop."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    quad = quad if quad is not None else DEFAULT_QUAD
    s = np.asarray(s, dtype=float)
    return s + dt * closed_loop_rhs(s, u, alpha, quad, ref)


# ---------------------------------------------------------------------------
# Linearisation


def _central_jacobian(fun, x0, h) -> np.ndarray:
    x0 = np.asarray(x0, dtype=float)
    E = np.eye(x0.size) * h
    fp = fun(x0 + E)
    fm = fun(x0 - E)
    return ((fp - fm) / (2 * h)).T


@dataclass(frozen=True)
class Linearization:
    A0: np.ndarray
    B0: np.ndarray
    K: np.ndarray
    A_K: np.ndarray


def closed_loop_matrix(quad: Quadcopter, h: float = 1e-6) -> np.ndarray:
    """``A_K``: Jacobian of the closed loop at the origin with ``u = 0, alpha = 0``."""
    zero_u = np.zeros(N_INPUT)
    zero_a = np.zeros(N_ALPHA)
    return _central_jacobian(lambda S: closed_loop_rhs(S, zero_u, zero_a, quad), np.zeros(N_STATE), h)


def linearize(quad: Quadcopter, h: float = 1e-6) -> Linearization:
    """Open-loop ``A0, B0`` at hover, nominal gain ``K`` and ``A_K``, by central differences."""
    p = quad.params
    mix = p.mixer()
    hover = np.full(N_INPUT, p.hover_thrust / N_INPUT)

    def f_open(s, U):
        w = U @ mix.T
        return rigid_body_rhs(s, w[..., 0], w[..., 1:4], p)

    A0 = _central_jacobian(lambda S: f_open(S, hover), np.zeros(N_STATE), h)
    B0 = _central_jacobian(lambda U: f_open(np.zeros(N_STATE), U), hover, h)
    K = _central_jacobian(
        lambda S: allocate(*nominal_control(S, quad.gains, p), params=p), np.zeros(N_STATE), h)
    return Linearization(A0, B0, K, closed_loop_matrix(quad, h))


DEFAULT_QUAD = Quadcopter()


# ---------------------------------------------------------------------------
# Simulation


@dataclass
class Trajectory:
    """Time-stamped rollout.  Row ``k`` holds the state at ``t[k]`` and the
    control, variation and reference applied from it."""

    t: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    alphas: np.ndarray
    refs: np.ndarray

    def errors(self) -> np.ndarray:
        return self.states - reference_state(self.refs)

    def to_csv(self, path) -> None:
        write_trajectory_csv(self, path)


def constant_reference(pos=(0.0, 0.0, 0.0), psi=0.0) -> Callable[[float], np.ndarray]:
    ref = np.array([*pos, psi], dtype=float)
    return lambda t: ref


def simulate(policy: Callable, s0, alpha_sampler: Callable, T: float, dt: float = 0.01,
             quad: Optional[Quadcopter] = None, reference: Optional[Callable] = None,
             check_finite: bool = True) -> Trajectory:
    """Fixed-step Euler rollout of the closed loop.

    ``policy`` maps error-coordinate states to motor increments,
    ``alpha_sampler(shape)`` draws one variation per step and ``reference(t)``
    returns ``(x_d, y_d, z_d, psi_d)``.  ``s0`` may carry leading batch
    dimensions, in which case every array gains them after the time axis.
    """
    if not T >= 0:
        raise ValueError("T must be non-negative")
    if not dt > 0:
        raise ValueError("dt must be positive")
    quad = quad if quad is not None else DEFAULT_QUAD
    reference = reference if reference is not None else constant_reference()
    s = np.array(s0, dtype=float)
    batch = s.shape[:-1]
    n_steps = int(round(T / dt))

    t = np.arange(n_steps + 1) * dt
    states = np.empty((n_steps + 1,) + s.shape)
    controls = np.empty((n_steps + 1,) + batch + (N_INPUT,))
    alphas = np.empty((n_steps + 1,) + batch + (N_ALPHA,))
    refs = np.empty((n_steps + 1,) + batch + (4,))

    for k in range(n_steps + 1):
        ref = np.broadcast_to(np.asarray(reference(t[k]), float), batch + (4,))
        e = s - reference_state(ref)
        u = np.asarray(policy(e), dtype=float)
        a = np.asarray(alpha_sampler(batch), dtype=float)
        states[k], controls[k], alphas[k], refs[k] = s, u, a, ref
        if k == n_steps:
            break
        try:
            # overflow shows up as a non-finite state, reported just below
            with np.errstate(over="ignore", invalid="ignore"):
                s = s + dt * closed_loop_rhs(s, u, a, quad, ref)
        except SingularAttitudeError as exc:
            raise SimulationError(f"singular attitude at t={t[k]:.4f}s: {exc}", t[k], s) from exc
        if check_finite and not np.all(np.isfinite(s)):
            raise SimulationError(f"non-finite state at t={t[k + 1]:.4f}s", t[k + 1], s)
    return Trajectory(t, states, controls, alphas, refs)


def write_trajectory_csv(traj: Trajectory, path) -> None:
    if traj.states.ndim != 2:
        raise ValueError("only single (unbatched) trajectories can be exported")
    rows = np.column_stack([traj.t, traj.states, traj.controls, traj.alphas, traj.refs])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for row in rows:
            writer.writerow([f"{v:.9g}" for v in row])


def read_trajectory_csv(path) -> Trajectory:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = tuple(next(reader))
        except StopIteration:
            raise ValueError(f"{path}: empty trajectory file") from None
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header!r}")
        data = [[float(v) for v in row] for row in reader if row]
    if not data:
        raise ValueError(f"{path}: trajectory file has a header but no rows")
    a = np.array(data)
    return Trajectory(a[:, 0], a[:, 1:13], a[:, 13:17], a[:, 17:21], a[:, 21:25])


def state_from_parts(pos=(0, 0, 0), att=(0, 0, 0), vel=(0, 0, 0), rate=(0, 0, 0)) -> np.ndarray:
    return np.concatenate([np.asarray(v, float) for v in (pos, att, vel, rate)])


__all__: Sequence[str] = (
    "AlphaBounds", "Linearization", "NominalGains", "QuadParams", "Quadcopter",
    "SimulationError", "SingularAttitudeError", "Trajectory", "UniformAlpha",
    "allocate", "closed_loop_matrix", "closed_loop_rhs", "dynamics_rhs", "euler_rates",
    "linearize", "nominal_control", "read_trajectory_csv", "reference_state",
    "rigid_body_rhs", "rotation_matrix", "simulate", "step", "write_trajectory_csv",
)
