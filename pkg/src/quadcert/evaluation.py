"""Closed-loop evaluation scenarios, tracking metrics and certificate gating."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import nn
from .dynamics import (AlphaBounds, Quadcopter, Trajectory, UniformAlpha, constant_reference,
                       read_trajectory_csv, simulate, zero_policy)
from .lmi import Certificate
from .trajectory import PolyTrajectory, next_sample_reference

log = logging.getLogger(__name__)


class UncertifiedControllerError(RuntimeError):
    pass


@dataclass(frozen=True)
class Metrics:
    time_to_5pct: float          # time after which the position error stays within 5% of its initial value
    ise: float                   # integral of squared position error [m^2 s]
    max_abs_psi_error: float
    terminal_error: float
    mean_error: float
    initial_error: float
    left_safety_box: bool

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def position_error(traj: Trajectory) -> np.ndarray:
    return np.linalg.norm(traj.states[..., 0:3] - traj.refs[..., 0:3], axis=-1)


def time_to_fraction(t, err, fraction: float = 0.05) -> float:
    """Settling time: first sample from which ``err`` stays at or below ``fraction * err[0]``.

    ``inf`` when the final sample is still outside the band.
    """
    err = np.asarray(err)
    if err.size == 0:
        return float("nan")
    outside = np.flatnonzero(err > fraction * err[0])
    if outside.size == 0:
        return float(t[0])
    if outside[-1] == err.size - 1:
        return float("inf")
    return float(t[outside[-1] + 1])


def compute_metrics(traj: Trajectory, safety_box: float = np.inf) -> Metrics:
    err = position_error(traj)
    t = traj.t
    ise = float(np.sum(err[:-1] ** 2 * np.diff(t))) if t.size > 1 else 0.0
    psi_e = np.abs(traj.states[..., 5] - traj.refs[..., 3])
    return Metrics(
        time_to_5pct=time_to_fraction(t, err),
        ise=ise,
        max_abs_psi_error=float(np.max(psi_e)),
        terminal_error=float(err[-1]),
        mean_error=float(np.mean(err)),
        initial_error=float(err[0]),
        left_safety_box=bool(np.any(err > safety_box)),
    )


def metrics_from_csv(path, safety_box: float = np.inf) -> Metrics:
    return compute_metrics(read_trajectory_csv(path), safety_box)


def net_policy(net: nn.Mlp) -> Callable:
    return lambda e: nn.forward(net, e)


def check_certified(net: nn.Mlp, cert: Optional[Certificate], uncertified: bool = False,
                    estimator=nn.lipschitz_sdp) -> float:
    """SDP Lipschitz estimate of ``net``; raises unless it is within the certificate."""
    est = float(estimator(net))
    if uncertified:
        log.warning("evaluating an uncertified controller (estimate %.5g)", est)
        return est
    if cert is None:
        raise UncertifiedControllerError(
            "combined mode needs a certificate; pass --uncertified to override")
    if est > cert.L_star:
        raise UncertifiedControllerError(
            f"actor Lipschitz estimate {est:.6g} exceeds certified L* = {cert.L_star:.6g}; "
            f"run enforce-lipschitz first or pass --uncertified")
    return est


def run_position(policy: Callable = zero_policy, target=(1.4, 0.0, 0.0), psi=0.0,
                 T: float = 60.0, dt: float = 0.01, seed: int = 0,
                 quad: Quadcopter = Quadcopter(), alpha: AlphaBounds = AlphaBounds(),
                 s0=None) -> Trajectory:
    """Hover-to-target scenario from the origin with per-step random alpha."""
    s0 = np.zeros(12) if s0 is None else np.asarray(s0, float)
    return simulate(policy, s0, UniformAlpha(alpha, seed=seed), T, dt, quad,
                    constant_reference(target, psi))


def run_trajectory(policy: Callable, traj: PolyTrajectory, T: Optional[float] = None,
                   dt: float = 0.01, seed: int = 0, quad: Quadcopter = Quadcopter(),
                   alpha: AlphaBounds = AlphaBounds()) -> Trajectory:
    """Moving-target tracking: the target is the planner position one sample ahead."""
    T = traj.t1 - traj.t0 if T is None else T
    s0 = np.zeros(12)
    s0[0:3] = traj.derivative(traj.t0)
    ref = next_sample_reference(traj, dt)
    return simulate(policy, s0, UniformAlpha(alpha, seed=seed), T, dt, quad,
                    lambda t: ref(traj.t0 + t))


def compare_time_to_5pct(net: nn.Mlp, seeds, **kw):
    """Per-seed ``(nominal, combined)`` time-to-5% pairs on the position scenario."""
    out = []
    for seed in seeds:
        a = compute_metrics(run_position(zero_policy, seed=seed, **kw)).time_to_5pct
        b = compute_metrics(run_position(net_policy(net), seed=seed, **kw)).time_to_5pct
        out.append((a, b))
    return np.array(out)
