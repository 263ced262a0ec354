"""PPO with GAE, a clipped surrogate and truncated BPTT over recurrent chunks."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import policy as pol
from .env import REWARD_NAMES, make_env
from .policy import ActorCritic, PolicyConfig

log = logging.getLogger(__name__)

CURVE_COLUMNS = [
    "iteration", "timesteps", "episodes", "mean_return",
    *(f"mean_{k}" for k in REWARD_NAMES),
    "policy_loss", "value_loss", "entropy", "approx_kl", "clip_fraction",
    "grad_norm", "lr", "log_std", "seconds", "eval_return",
]


@dataclass
class PpoConfig:
    gamma: float = 0.999
    lam: float = 0.9
    horizon: int = 800
    batch_size: int = 22400
    minibatch_size: int = 2048
    sgd_iterations: int = 32
    grad_clip: float = 1.0
    lr_start: float = 1e-4
    lr_end: float = 5e-6
    clip_ratio: float = 0.2
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    chunk_len: int = 16
    workers: int = 0
    iterations: int = 100
    checkpoint_every: int = 10
    seed: int = 0
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        for name in ("horizon", "batch_size", "minibatch_size", "sgd_iterations", "chunk_len", "iterations"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.minibatch_size > self.batch_size:
            raise ValueError("minibatch_size must not exceed batch_size")
        if self.minibatch_size % self.chunk_len:
            raise ValueError("minibatch_size must be a multiple of chunk_len")
        if self.batch_size % self.horizon:
            raise ValueError("batch_size must be a multiple of horizon")
        if self.workers and self.workers * self.horizon != self.batch_size:
            raise ValueError(f"workers x horizon = {self.workers * self.horizon} "
                             f"does not match batch_size {self.batch_size}")
        if self.grad_clip <= 0 or self.clip_ratio <= 0:
            raise ValueError("grad_clip and clip_ratio must be positive")

    @property
    def n_workers(self) -> int:
        return self.workers or self.batch_size // self.horizon

    @property
    def total_timesteps(self) -> int:
        return self.iterations * self.batch_size


DESK_PPO = dict(horizon=200, batch_size=3200, minibatch_size=256, sgd_iterations=8)


def compute_gae(rewards, values, dones, gamma: float, lam: float, last_value=0.0):
    """Generalised advantage estimates along axis 0.

    ``dones[t]`` marks that step ``t`` ended an episode, so no value is
    bootstrapped across it.  ``last_value`` is V of the state after the
    final step.  Returns ``(advantages, returns)``.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    d = np.asarray(dones, dtype=np.float64)
    adv = np.zeros_like(r)
    next_v = np.asarray(last_value, dtype=np.float64) * np.ones_like(r[0])
    running = np.zeros_like(r[0])
    for t in range(len(r) - 1, -1, -1):
        live = 1.0 - d[t]
        delta = r[t] + gamma * next_v * live - v[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
        next_v = v[t]
    return adv, adv + v


def lr_schedule(step: int, cfg: PpoConfig) -> float:
    """Linear decay from ``lr_start`` to ``lr_end`` over the training length."""
    frac = min(max(step / cfg.total_timesteps, 0.0), 1.0)
    return cfg.lr_start + (cfg.lr_end - cfg.lr_start) * frac


class Adam:
    def __init__(self, params, b1=0.9, b2=0.999, eps=1e-8):
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            upd = lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            params[k] = (params[k] - upd).astype(params[k].dtype)

    def state(self):
        return ({k: v.copy() for k, v in self.m.items()},
                {k: v.copy() for k, v in self.v.items()}, self.t)

    def restore(self, state):
        self.m, self.v, self.t = state


def clip_grad_norm(grads: dict, max_norm: float):
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


# ----------------------------------------------------------------- rollouts

@dataclass
class RolloutBatch:
    """Time-major (T, N, ...) arrays from N workers, merged in worker order."""

    inputs: np.ndarray
    raw_actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    resets: np.ndarray
    h: np.ndarray
    c: np.ndarray
    last_values: np.ndarray
    episode_returns: list = field(default_factory=list)
    episode_components: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return int(self.rewards.size)

    def transitions(self):
        """Per-transition tuples, used for order-independent comparisons."""
        T, N = self.rewards.shape
        return [(tuple(self.inputs[t, n]), tuple(self.raw_actions[t, n]), float(self.rewards[t, n]))
                for n in range(N) for t in range(T)]


class Worker:
    """One environment stream with its own seed sequence and recurrent state."""

    def __init__(self, env, seed_seq: np.random.SeedSequence):
        self.env = env
        self.rng = np.random.default_rng(seed_seq)
        self.obs = None
        self.needs_reset = True
        self.ep_return = 0.0
        self.ep_comps = np.zeros(len(REWARD_NAMES))

    def reset(self):
        self.obs = self.env.reset(int(self.rng.integers(2 ** 31)))
        self.prev_action = np.zeros(self.env.act_dim)
        self.prev_reward = 0.0
        self.ep_return = 0.0
        self.ep_comps = np.zeros(len(REWARD_NAMES))
        self.needs_reset = False


def make_workers(task: str, env_cfg, n: int, seed: int, order=None):
    seqs = np.random.SeedSequence(seed).spawn(n)
    order = range(n) if order is None else order
    return [Worker(make_env(task, env_cfg), seqs[k]) for k in order]


def collect_rollouts(net: ActorCritic, workers: list, horizon: int,
                     state=None, deterministic: bool = False):
    """Step every worker ``horizon`` times in lockstep.

    ``state`` carries the recurrent (h, c) arrays across calls so episodes
    may span iterations.  Returns ``(batch, state)``.
    """
    n = len(workers)
    A = net.act_dim
    H = max(net.state_size, 1)
    dt = net.dtype
    if state is None:
        state = net.initial_state(n)
    h, c = state
    inputs = np.zeros((horizon, n, net.in_dim), dt)
    raw_actions = np.zeros((horizon, n, A))
    log_probs = np.zeros((horizon, n))
    rewards = np.zeros((horizon, n))
    values = np.zeros((horizon, n))
    dones = np.zeros((horizon, n), bool)
    resets = np.zeros((horizon, n), bool)
    hs = np.zeros((horizon, n, H), dt)
    cs = np.zeros((horizon, n, H), dt)
    ep_returns, ep_comps = [], []
    log_std = net.log_std()

    for t in range(horizon):
        for k, w in enumerate(workers):
            if w.needs_reset:
                w.reset()
                resets[t, k] = True
                if net.use_lstm:
                    h[k] = 0.0
                    c[k] = 0.0
        if net.use_lstm:
            hs[t], cs[t] = h, c
        obs = np.stack([w.obs for w in workers])
        pa = np.stack([w.prev_action for w in workers])
        pr = np.array([w.prev_reward for w in workers])
        x = net.make_input(obs, pa, pr)
        inputs[t] = x
        mean, _, v, (h, c), _ = net.forward(x[None], (h, c))
        mean, v = mean[0].astype(np.float64), v[0].astype(np.float64)
        values[t] = v
        for k, w in enumerate(workers):
            if deterministic:
                a, raw, lp = np.clip(mean[k], -1, 1), mean[k], pol.gaussian_log_prob(mean[k], mean[k], log_std)
            else:
                a, raw, lp = pol.sample_action(mean[k], log_std, w.rng)
            raw_actions[t, k] = raw
            log_probs[t, k] = lp
            obs_k, r, done, info = w.env.step(a)
            rewards[t, k] = r
            dones[t, k] = done
            w.ep_return += r
            w.ep_comps += np.asarray(info["reward_components"], dtype=float)
            w.obs, w.prev_action, w.prev_reward = obs_k, a, r
            if done:
                ep_returns.append(w.ep_return)
                ep_comps.append(w.ep_comps.copy())
                w.needs_reset = True

    # bootstrap values for unfinished episodes
    last = np.zeros(n)
    live = [k for k, w in enumerate(workers) if not w.needs_reset]
    if live:
        obs = np.stack([w.obs for w in workers])
        pa = np.stack([w.prev_action for w in workers])
        pr = np.array([w.prev_reward for w in workers])
        _, _, v, _, _ = net.forward(net.make_input(obs, pa, pr)[None], (h, c))
        last[live] = v[0][live]
    batch = RolloutBatch(inputs, raw_actions, log_probs, rewards, values, dones, resets,
                         hs, cs, last, ep_returns, ep_comps)
    return batch, (h, c)


# ------------------------------------------------------------------- update

def surrogate_terms(logp_new, logp_old, adv, clip_ratio):
    """Per-sample clipped surrogate and its derivative with respect to logp_new."""
    ratio = np.exp(logp_new - logp_old)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip_ratio, 1.0 + clip_ratio) * adv
    surr = np.minimum(unclipped, clipped)
    active = unclipped <= clipped
    return surr, np.where(active, unclipped, 0.0), ratio


def policy_loss(z, mean, log_std, logp_old, adv, mask, clip_ratio):
    """Masked mean of the negated clipped surrogate and its gradients.

    Returns ``(loss, dloss/dmean, dloss/dlog_std, logp_new, ratio)``; the
    log-std gradient treats ``log_std`` as shared across samples.
    """
    count = mask.sum()
    sigma = np.exp(log_std)
    zs = (z - mean) / sigma
    logp = pol.gaussian_log_prob(z, mean, log_std)
    surr, dsurr, ratio = surrogate_terms(logp, logp_old, adv, clip_ratio)
    loss = -(surr * mask).sum() / count
    g_logp = -dsurr * mask / count
    dmean = g_logp[..., None] * zs / sigma
    dlog_std = (g_logp[..., None] * (zs ** 2 - 1.0)).reshape(-1, zs.shape[-1]).sum(0)
    return loss, dmean, dlog_std, logp, ratio


def _chunks(T: int, N: int, L: int):
    return [(n, s) for n in range(N) for s in range(0, T, L)]


def ppo_update(net: ActorCritic, opt: Adam, batch: RolloutBatch, cfg: PpoConfig,
               lr: float, rng: np.random.Generator):
    """Run ``sgd_iterations`` epochs of minibatch PPO on ``batch`` in place.

    Returns a diagnostics dict.  If any loss or gradient turns non-finite
    the parameters and optimiser state are restored and
    ``diagnostics["aborted"]`` is set.
    """
    T, N = batch.rewards.shape
    L = cfg.chunk_len
    adv, ret = compute_gae(batch.rewards, batch.values, batch.dones, cfg.gamma, cfg.lam, batch.last_values)
    std = adv.std()
    adv = (adv - adv.mean()) / (std if std > 1e-8 else 1.0)

    chunks = _chunks(T, N, L)
    per_mb = max(1, cfg.minibatch_size // L)
    snapshot = {k: v.copy() for k, v in net.params.items()}
    opt_snapshot = opt.state()
    A = net.act_dim
    dt = net.dtype
    stats = {"policy_loss": [], "value_loss": [], "entropy": [], "approx_kl": [],
             "clip_fraction": [], "grad_norm": []}

    for _ in range(cfg.sgd_iterations):
        order = rng.permutation(len(chunks))
        for i0 in range(0, len(order), per_mb):
            sel = [chunks[j] for j in order[i0:i0 + per_mb]]
            M = len(sel)
            X = np.zeros((L, M, net.in_dim), dt)
            Z = np.zeros((L, M, A))
            LP = np.zeros((L, M))
            AD = np.zeros((L, M))
            RT = np.zeros((L, M))
            RS = np.zeros((L, M))
            mask = np.zeros((L, M))
            h0 = np.zeros((M, max(net.state_size, 1)), dt)
            c0 = np.zeros_like(h0)
            for m, (n, s) in enumerate(sel):
                e = min(s + L, T)
                k = e - s
                X[:k, m] = batch.inputs[s:e, n]
                Z[:k, m] = batch.raw_actions[s:e, n]
                LP[:k, m] = batch.log_probs[s:e, n]
                AD[:k, m] = adv[s:e, n]
                RT[:k, m] = ret[s:e, n]
                RS[1:k, m] = batch.resets[s + 1:e, n]
                mask[:k, m] = 1.0
                h0[m], c0[m] = batch.h[s, n], batch.c[s, n]
            state = (h0, c0) if net.use_lstm else None
            mean, log_std, value, _, cache = net.forward(X, state, RS if net.use_lstm else None)
            mean = mean.astype(np.float64)
            value = value.astype(np.float64)
            log_std = log_std.astype(np.float64)
            count = mask.sum()
            pi_loss, dmean, g_ls, logp, ratio = policy_loss(Z, mean, log_std, LP, AD, mask, cfg.clip_ratio)
            entropy = pol.gaussian_entropy(log_std)
            v_err = value - RT
            v_loss = (v_err ** 2 * mask).sum() / count
            total = pi_loss + cfg.value_coef * v_loss - cfg.entropy_coef * entropy
            dvalue = cfg.value_coef * 2.0 * v_err * mask / count
            grads = net.backward(cache, dmean, dvalue)
            raw_ls = net.params["log_std"]
            inside = (raw_ls >= pol.LOG_STD_MIN) & (raw_ls <= pol.LOG_STD_MAX)
            grads["log_std"] = ((g_ls - cfg.entropy_coef) * inside).astype(dt)

            finite = math.isfinite(total) and all(np.all(np.isfinite(g)) for g in grads.values())
            if not finite:
                net.params = snapshot
                opt.restore(opt_snapshot)
                log.warning("non-finite loss or gradient; update aborted and parameters restored")
                return {"aborted": True, **{k: float("nan") for k in stats}}
            gnorm = clip_grad_norm(grads, cfg.grad_clip)
            opt.step(net.params, grads, lr)
            net.params["log_std"] = np.clip(net.params["log_std"], pol.LOG_STD_MIN, pol.LOG_STD_MAX)

            stats["policy_loss"].append(pi_loss)
            stats["value_loss"].append(v_loss)
            stats["entropy"].append(entropy)
            stats["approx_kl"].append(float(((LP - logp) * mask).sum() / count))
            stats["clip_fraction"].append(float(((np.abs(ratio - 1.0) > cfg.clip_ratio) * mask).sum() / count))
            stats["grad_norm"].append(gnorm)
    diag = {k: float(np.mean(v)) for k, v in stats.items()}
    diag["aborted"] = False
    return diag


# -------------------------------------------------------------------- train

@dataclass
class TrainResult:
    net: ActorCritic
    curve: list
    checkpoints: list


def train(task: str, env_cfg=None, policy_cfg: PolicyConfig | None = None,
          cfg: PpoConfig | None = None, out_dir=None, dtype=np.float32,
          progress=None) -> TrainResult:
    """Train a residual agent; writes ``curve.csv`` and checkpoints under ``out_dir``.

    ``progress(row, net)`` is called after every iteration and may add an
    ``eval_return`` entry to the row before it is written.
    """
    cfg = cfg or PpoConfig()
    probe = make_env(task, env_cfg)
    net = ActorCritic(probe.obs_dim, probe.act_dim, policy_cfg, seed=cfg.seed, dtype=dtype)
    workers = make_workers(task, env_cfg, cfg.n_workers, cfg.seed)
    opt = Adam(net.params, eps=cfg.adam_eps)
    rng = np.random.default_rng([cfg.seed, 1])
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    curve, checkpoints = [], []
    state = None
    steps = 0
    for it in range(cfg.iterations):
        t0 = time.perf_counter()
        batch, state = collect_rollouts(net, workers, cfg.horizon, state)
        lr = lr_schedule(steps, cfg)
        diag = ppo_update(net, opt, batch, cfg, lr, rng)
        net.norm.update(batch.inputs.reshape(-1, net.in_dim))
        steps += batch.size
        rets = batch.episode_returns
        comps = np.mean(batch.episode_components, axis=0) if rets else np.full(len(REWARD_NAMES), np.nan)
        row = {
            "iteration": it, "timesteps": steps, "episodes": len(rets),
            "mean_return": float(np.mean(rets)) if rets else float("nan"),
            **{f"mean_{k}": float(v) for k, v in zip(REWARD_NAMES, comps)},
            **{k: diag[k] for k in ("policy_loss", "value_loss", "entropy", "approx_kl",
                                    "clip_fraction", "grad_norm")},
            "lr": lr, "log_std": float(np.mean(net.log_std())),
            "seconds": time.perf_counter() - t0,
            "eval_return": float("nan"),
        }
        curve.append(row)
        if progress is not None:
            progress(row, net)
        log.info("iter %d  return %.4f  kl %.5f", it, row["mean_return"], row["approx_kl"])
        last = it == cfg.iterations - 1
        if out is not None and (last or (cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0)):
            path = out / f"checkpoint_{it + 1:05d}.bin"
            pol.save(net, path)
            checkpoints.append(path)
    if out is not None:
        write_curve(out / "curve.csv", curve)
        pol.save(net, out / "policy.bin")
    return TrainResult(net, curve, checkpoints)


def write_curve(path, curve: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS)
        w.writeheader()
        for row in curve:
            w.writerow({k: repr(float(v)) if isinstance(v, float) else v for k, v in row.items()})
