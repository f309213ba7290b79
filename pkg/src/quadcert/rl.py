"""PPO actor-critic training of the learned controller on the nominal closed loop."""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import nn
from .dynamics import (AlphaBounds, Quadcopter, SingularAttitudeError, UniformAlpha,
                       closed_loop_rhs, reference_state)

log = logging.getLogger(__name__)

LOG_2PI = math.log(2 * math.pi)
CURVE_HEADER = ("iter", "mean_reward", "mean_ep_len", "actor_loss", "critic_loss", "entropy")


@dataclass(frozen=True)
class PpoConfig:
    clip_factor: float = 0.2
    discount: float = 0.99
    gae_factor: float = 0.95
    entropy_weight: float = 0.4
    actor_lr: float = 1e-3
    critic_lr: float = 1e-2
    horizon: int = 2048
    minibatch: int = 2048
    epochs: int = 4
    iterations: int = 200
    seed: int = 0
    n_envs: int = 8
    actor_hidden: tuple = (64, 64, 64, 64, 64)
    critic_hidden: tuple = (256, 256, 192, 192)
    logvar_init: float = -1.0
    logvar_min: float = -6.0
    logvar_max: float = -1.0
    dump_dir: Optional[str] = None

    def __post_init__(self):
        if not 0 < self.discount < 1:
            raise ValueError("discount must lie in (0, 1)")
        if not 0 <= self.gae_factor <= 1:
            raise ValueError("gae_factor must lie in [0, 1]")
        if self.horizon < 0 or self.minibatch <= 0 or self.epochs < 0 or self.iterations < 0:
            raise ValueError("horizon, minibatch, epochs and iterations must be non-negative")
        if self.n_envs < 1 or self.horizon % self.n_envs:
            raise ValueError("horizon must be a multiple of n_envs")


@dataclass(frozen=True)
class EnvConfig:
    quad: Quadcopter = Quadcopter()
    alpha: AlphaBounds = AlphaBounds()
    dt: float = 0.01
    episode_steps: int = 1000
    ref_radius: float = 2.0
    max_tilt: float = 1.2
    max_pos_error: float = 20.0


# --- reward and advantages --------------------------------------------------------

def reward(s, ref) -> np.ndarray:
    """Shaped tracking reward in ``(0, 1]``.

    ``ref`` is ``(x_d, y_d, z_d, psi_d)``; the near branch (position error at
    most 0.3 m) also rewards small linear velocity.
    """
    s = np.asarray(s, dtype=float)
    ref = np.asarray(ref, dtype=float)
    pe = np.linalg.norm(s[..., 0:3] - ref[..., 0:3], axis=-1)
    psi_e = np.abs(s[..., 5] - ref[..., 3])
    r_pos = np.exp(-2.0 * pe)
    r_psi = np.exp(-psi_e)
    r_vel = np.exp(-2.0 * np.linalg.norm(s[..., 6:9], axis=-1))
    return np.where(pe > 0.3, 0.8 * r_pos + 0.2 * r_psi, 0.6 * r_pos + 0.2 * r_psi + 0.2 * r_vel)


def gae(rewards, values, bootstrap, discount, gae_factor, dones=None):
    """Generalised advantage estimates and value targets.

    Time runs along axis 0; any trailing axes are independent environments.
    ``dones[t]`` marks that the episode ended after step ``t``; the next
    value is then not bootstrapped and the advantage recursion restarts.
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    if r.shape != v.shape:
        raise ValueError("rewards and values must have equal length")
    d = np.zeros_like(r) if dones is None else np.asarray(dones, dtype=float)
    T = r.shape[0]
    adv = np.zeros_like(r)
    next_v = np.broadcast_to(np.asarray(bootstrap, dtype=float), r.shape[1:])
    last = np.zeros(r.shape[1:])
    for t in range(T - 1, -1, -1):
        live = 1.0 - d[t]
        delta = r[t] + discount * next_v * live - v[t]
        last = delta + discount * gae_factor * live * last
        adv[t] = last
        next_v = v[t]
    return adv, adv + v


# --- networks ---------------------------------------------------------------------

@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0

    def step(self, params, grads):
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        out = []
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            out.append(p - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))
        return out


@dataclass
class ActorCritic:
    """Actor with a shared relu trunk and linear mean / log-variance heads; relu critic.

    ``mean_net`` is the trunk plus mean head, i.e. the deployable controller.
    """

    mean_net: nn.Mlp
    logvar_W: np.ndarray
    logvar_b: np.ndarray
    critic: nn.Mlp
    logvar_min: float = -6.0
    logvar_max: float = -1.0
    actor_opt: Optional[Adam] = None
    critic_opt: Optional[Adam] = None

    @classmethod
    def init(cls, cfg: PpoConfig = PpoConfig(), rng=None, n=12, m=4) -> "ActorCritic":
        rng = np.random.default_rng(rng)
        mean_net = nn.init_mlp((n,) + tuple(cfg.actor_hidden) + (m,), rng, final_scale=0.01)
        critic = nn.init_mlp((n,) + tuple(cfg.critic_hidden) + (1,), rng)
        h = cfg.actor_hidden[-1]
        return cls(mean_net, np.zeros((m, h)), np.full(m, cfg.logvar_init), critic,
                   cfg.logvar_min, cfg.logvar_max, Adam(cfg.actor_lr), Adam(cfg.critic_lr))

    def actor_params(self) -> list:
        return self.mean_net.params() + [self.logvar_W, self.logvar_b]

    def with_actor_params(self, params) -> "ActorCritic":
        return replace(self, mean_net=self.mean_net.with_params(params[:-2]),
                       logvar_W=params[-2], logvar_b=params[-1])

    def policy(self, s):
        """``(mean, logvar, trace, raw_logvar)`` for a batch of error states."""
        mean, trace = nn.forward_trace(self.mean_net, s)
        feat = trace[-1][0]
        raw = feat @ self.logvar_W.T + self.logvar_b
        return mean, np.clip(raw, self.logvar_min, self.logvar_max), trace, raw

    def value(self, s) -> np.ndarray:
        return nn.forward(self.critic, s)[..., 0]


def gaussian_logprob(a, mean, logvar) -> np.ndarray:
    return -0.5 * np.sum((a - mean) ** 2 * np.exp(-logvar) + logvar + LOG_2PI, axis=-1)


def gaussian_entropy(logvar) -> np.ndarray:
    return 0.5 * np.sum(logvar + LOG_2PI + 1.0, axis=-1)


# --- rollouts -----------------------------------------------------------------------

@dataclass
class RolloutBuffer:
    """Transitions laid out as ``(steps, envs)``.

    ``r`` is the raw reward; ``boot`` holds the discounted value of the cut
    state for episodes ended by timeout (zero elsewhere) and ``bootstrap``
    the value of each environment's state after the last step.
    """

    s: np.ndarray
    u: np.ndarray
    logprob: np.ndarray
    r: np.ndarray
    value: np.ndarray
    done: np.ndarray
    boot: np.ndarray
    bootstrap: np.ndarray
    episode_returns: list
    episode_lengths: list
    faults: int = 0

    def __len__(self):
        return self.r.size

    def flat(self, name):
        a = getattr(self, name)
        return a.reshape((-1,) + a.shape[2:])


def sample_reference(rng, radius: float = 2.0, size=None) -> np.ndarray:
    """Uniform position in a ball of ``radius`` around the origin, zero yaw."""
    shape = () if size is None else (size,)
    d = rng.standard_normal(shape + (3,))
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    rad = radius * rng.uniform(size=shape + (1,)) ** (1 / 3)
    return np.concatenate([d * rad, np.zeros(shape + (1,))], axis=-1)


def _faulted(s, ref, env: EnvConfig) -> np.ndarray:
    s = np.asarray(s)
    bad = ~np.all(np.isfinite(s), axis=-1)
    with np.errstate(invalid="ignore"):
        bad |= np.max(np.abs(s[..., 3:5]), axis=-1) > env.max_tilt
        bad |= np.linalg.norm(s[..., 0:3] - ref[..., 0:3], axis=-1) > env.max_pos_error
    return bad


def _advance(s, u, alpha, ref, env: EnvConfig):
    """Euler step for a batch; rows with a singular attitude are returned unchanged and flagged."""
    try:
        return s + env.dt * closed_loop_rhs(s, u, alpha, env.quad, ref), np.zeros(len(s), bool)
    except SingularAttitudeError:
        out, bad = s.copy(), np.zeros(len(s), bool)
        for k in range(len(s)):
            try:
                out[k] = s[k] + env.dt * closed_loop_rhs(s[k], u[k], alpha[k], env.quad, ref[k])
            except SingularAttitudeError:
                bad[k] = True
        return out, bad


class EnvBatch:
    """State of ``n_envs`` independent episodes, carried across rollouts."""

    def __init__(self, env: EnvConfig, n_envs: int = 1, seed: int = 0):
        self.env = env
        self.rng = np.random.default_rng(seed)
        self.alpha = UniformAlpha(env.alpha, seed=int(self.rng.integers(2 ** 32)))
        self.s = np.zeros((n_envs, 12))
        self.ref = sample_reference(self.rng, env.ref_radius, n_envs)
        self.ep_ret = np.zeros(n_envs)
        self.ep_len = np.zeros(n_envs, int)

    @property
    def n_envs(self) -> int:
        return len(self.s)


def collect_rollout(ac: ActorCritic, env: EnvConfig = EnvConfig(), horizon: int = 2048,
                    seed: int = 0, discount: float = 0.99, n_envs: int = 1,
                    batch: Optional[EnvBatch] = None) -> RolloutBuffer:
    """Run the stochastic policy for ``horizon`` transitions over ``n_envs`` environments.

    Episodes start at the origin with a random reference and restart after a
    fault or after ``env.episode_steps`` steps; the network sees the error
    state.  Passing ``batch`` continues its episodes (and ignores ``seed``);
    otherwise fresh episodes are started.  Deterministic for a fixed
    ``(seed, n_envs)``.
    """
    if batch is None:
        if n_envs < 1:
            raise ValueError("n_envs must be positive")
        batch = EnvBatch(env, n_envs, seed)
    env, E = batch.env, batch.n_envs
    if horizon < 0 or horizon % E:
        raise ValueError("horizon must be a non-negative multiple of n_envs")
    rng, alpha = batch.rng, batch.alpha
    T, n, m = horizon // E, 12, ac.mean_net.output_dim
    S = np.zeros((T, E, n))
    U = np.zeros((T, E, m))
    LP, R, V, B = (np.zeros((T, E)) for _ in range(4))
    D = np.zeros((T, E), dtype=bool)
    returns, lengths, faults = [], [], 0
    s, ref, ep_ret, ep_len = batch.s, batch.ref, batch.ep_ret, batch.ep_len
    for t in range(T):
        e = s - reference_state(ref)
        mean, logvar, _, _ = ac.policy(e)
        u = mean + np.exp(0.5 * logvar) * rng.standard_normal(mean.shape)
        S[t], U[t] = e, u
        LP[t] = gaussian_logprob(u, mean, logvar)
        V[t] = ac.value(e)
        s_next, singular = _advance(s, u, alpha((E,)), ref, env)
        fault = singular | _faulted(s_next, ref, env)
        with np.errstate(invalid="ignore", over="ignore"):
            R[t] = np.where(fault & ~np.all(np.isfinite(s_next), axis=-1), 0.0, reward(s_next, ref))
        R[t] = np.nan_to_num(R[t], nan=0.0)
        ep_ret += R[t]
        ep_len += 1
        timeout = (ep_len >= env.episode_steps) & ~fault
        if np.any(timeout):
            B[t, timeout] = discount * ac.value(s_next[timeout] - reference_state(ref[timeout]))
        done = fault | timeout
        D[t] = done
        if np.any(done):
            faults += int(np.sum(fault))
            returns += ep_ret[done].tolist()
            lengths += ep_len[done].tolist()
            s_next[done] = 0.0
            ref[done] = sample_reference(rng, env.ref_radius, int(np.sum(done)))
            ep_ret[done], ep_len[done] = 0.0, 0
        s = s_next
    batch.s = s
    bootstrap = ac.value(s - reference_state(ref)) if T else np.zeros(E)
    return RolloutBuffer(S, U, LP, R, V, D, B, bootstrap, returns, lengths, faults)


# --- losses and update -------------------------------------------------------------

def actor_loss_and_grad(ac: ActorCritic, s, u, old_logprob, adv, clip: float, ent_w: float):
    """Clipped surrogate with entropy bonus; returns ``(loss, grads, info)``."""
    B = s.shape[0]
    mean, logvar, trace, raw = ac.policy(s)
    lp = gaussian_logprob(u, mean, logvar)
    ratio = np.exp(lp - old_logprob)
    surr1 = ratio * adv
    surr2 = np.clip(ratio, 1 - clip, 1 + clip) * adv
    ent = gaussian_entropy(logvar)
    loss = -np.mean(np.minimum(surr1, surr2)) - ent_w * np.mean(ent)

    # d loss / d lp: only where the unclipped branch is the active minimum
    active = surr1 <= surr2
    g_lp = -(active * adv * ratio) / B
    inv_var = np.exp(-logvar)
    g_mean = g_lp[:, None] * (u - mean) * inv_var
    g_logvar = g_lp[:, None] * 0.5 * ((u - mean) ** 2 * inv_var - 1.0) - ent_w * 0.5 / B
    g_logvar = g_logvar * ((raw > ac.logvar_min) & (raw < ac.logvar_max))

    grads, _ = nn.backward(ac.mean_net, trace, g_mean)
    feat = trace[-1][0]
    gW_v = g_logvar.T @ feat
    gb_v = g_logvar.sum(axis=0)
    g_feat = g_logvar @ ac.logvar_W
    trunk_grads, _ = nn.backward_layers(ac.mean_net.layers[:-1], trace[:-1], g_feat)
    for i, g in enumerate(trunk_grads):
        grads[i] = grads[i] + g
    info = {"entropy": float(np.mean(ent)),
            "clip_fraction": float(np.mean(np.abs(ratio - 1) > clip))}
    return float(loss), grads + [gW_v, gb_v], info


def critic_loss_and_grad(critic: nn.Mlp, s, targets):
    v, trace = nn.forward_trace(critic, s)
    err = v[:, 0] - targets
    loss = float(np.mean(err ** 2))
    grads, _ = nn.backward(critic, trace, (2.0 * err / err.size)[:, None])
    return loss, grads


class NonFiniteLossError(FloatingPointError):
    pass


def _dump(cfg: PpoConfig, buf: RolloutBuffer, tag: str) -> str:
    if not cfg.dump_dir:
        return ""
    os.makedirs(cfg.dump_dir, exist_ok=True)
    path = os.path.join(cfg.dump_dir, f"ppo_failure_{tag}.npz")
    np.savez(path, s=buf.s, u=buf.u, logprob=buf.logprob, r=buf.r, value=buf.value, done=buf.done)
    return path


def ppo_update(ac: ActorCritic, buf: RolloutBuffer, cfg: PpoConfig, rng=None):
    """``cfg.epochs`` passes of clipped-surrogate and value-regression updates."""
    if len(buf) == 0:
        raise ValueError("empty rollout buffer")
    rng = np.random.default_rng(rng)
    adv, ret = gae(buf.r + buf.boot, buf.value, buf.bootstrap, cfg.discount, cfg.gae_factor,
                   buf.done)
    adv, ret = adv.reshape(-1), ret.reshape(-1)
    s_all, u_all, lp_all = buf.flat("s"), buf.flat("u"), buf.flat("logprob")
    if adv.size > 1 and adv.std() > 0:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    actor_opt = ac.actor_opt or Adam(cfg.actor_lr)
    critic_opt = ac.critic_opt or Adam(cfg.critic_lr)
    stats = {"actor_loss": math.nan, "critic_loss": math.nan, "entropy": math.nan}
    N = len(buf)
    for epoch in range(cfg.epochs):
        order = rng.permutation(N)
        for start in range(0, N, cfg.minibatch):
            idx = order[start:start + cfg.minibatch]
            a_loss, a_grads, info = actor_loss_and_grad(
                ac, s_all[idx], u_all[idx], lp_all[idx], adv[idx],
                cfg.clip_factor, cfg.entropy_weight)
            c_loss, c_grads = critic_loss_and_grad(ac.critic, s_all[idx], ret[idx])
            if not (math.isfinite(a_loss) and math.isfinite(c_loss)):
                path = _dump(cfg, buf, f"e{epoch}")
                raise NonFiniteLossError(f"non-finite loss (actor {a_loss}, critic {c_loss})"
                                         + (f"; batch dumped to {path}" if path else ""))
            ac = ac.with_actor_params(actor_opt.step(ac.actor_params(), a_grads))
            ac = replace(ac, critic=ac.critic.with_params(critic_opt.step(ac.critic.params(), c_grads)))
            stats = {"actor_loss": a_loss, "critic_loss": c_loss, "entropy": info["entropy"]}
    return replace(ac, actor_opt=actor_opt, critic_opt=critic_opt), stats


def train(cfg: PpoConfig = PpoConfig(), env: EnvConfig = EnvConfig(), out_path=None,
          curve_path=None, ac: Optional[ActorCritic] = None):
    """Collect / update loop; returns ``(actor_critic, curve_rows)``."""
    rng = np.random.default_rng(cfg.seed)
    ac = ac if ac is not None else ActorCritic.init(cfg, rng)
    envs = EnvBatch(env, cfg.n_envs, seed=int(rng.integers(2 ** 32)))
    rows = []
    for it in range(cfg.iterations):
        buf = collect_rollout(ac, horizon=cfg.horizon, discount=cfg.discount, batch=envs)
        ac, stats = ppo_update(ac, buf, cfg, rng)
        rows.append((it, float(np.mean(buf.r)) if len(buf) else math.nan,
                     float(np.mean(buf.episode_lengths)) if buf.episode_lengths else 0.0,
                     stats["actor_loss"], stats["critic_loss"], stats["entropy"]))
        log.info("iter %d mean reward %.4f faults %d", it, rows[-1][1], buf.faults)
    if out_path is not None:
        nn.save(ac.mean_net, out_path)
    if curve_path is not None:
        write_curve(rows, curve_path)
    return ac, rows


def write_curve(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for r in rows:
            w.writerow([r[0]] + ["%.9g" % v for v in r[1:]])


def read_curve(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        if tuple(next(rd)) != CURVE_HEADER:
            raise ValueError(f"{path}: not a learning-curve file")
        return np.array([[float(v) for v in row] for row in rd]).reshape(-1, len(CURVE_HEADER))
