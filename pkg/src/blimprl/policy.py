"""Recurrent actor-critic with hand-written backpropagation through time.

Network layout for one timestep::

    x   = concat(obs, prev_action, prev_reward)
    xn  = clip((x - running_mean) / running_std, -10, 10)
    h1  = tanh(layer_norm(xn @ W1 + b1) * g1 + s1)
    h2  = tanh(layer_norm(h1 @ W2 + b2) * g2 + s2)
    h   = LSTM(h2, h_prev, c_prev)            # or h = h2 without recurrence
    mean  = tanh(h @ Wa + ba)
    value = h @ Wv + bv

The Gaussian policy has a state-independent ``log_std`` vector.  The output
heads start with weights of magnitude ``out_init`` (1e-12 by default) so a
fresh agent emits a near-zero residual.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LOG_STD_MIN, LOG_STD_MAX = -5.0, 1.0
NORM_CLIP = 10.0
LN_EPS = 1e-8
MAGIC = "BLIMPRL-POLICY"
FORMAT_VERSION = 1


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def layer_norm(x, eps=LN_EPS):
    """Normalise over the last axis; returns (xhat, inverse std)."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    return xc * inv, inv


def layer_norm_backward(dxhat, xhat, inv):
    n = xhat.shape[-1]
    return inv * (dxhat - dxhat.sum(-1, keepdims=True) / n
                  - xhat * (dxhat * xhat).sum(-1, keepdims=True) / n)


class RunningNorm:
    """Running mean/variance of policy inputs (parallel Welford update)."""

    def __init__(self, size, dtype=np.float64):
        self.mean = np.zeros(size, dtype=dtype)
        self.var = np.ones(size, dtype=dtype)
        self.count = 0.0

    def update(self, x):
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.mean.shape[0])
        n = x.shape[0]
        if n == 0:
            return
        bm, bv = x.mean(0), x.var(0)
        if self.count == 0:
            self.mean, self.var, self.count = bm.astype(self.mean.dtype), bv.astype(self.var.dtype), float(n)
            return
        tot = self.count + n
        delta = bm - self.mean
        self.mean = (self.mean + delta * n / tot).astype(self.mean.dtype)
        m2 = self.var * self.count + bv * n + delta ** 2 * self.count * n / tot
        self.var = (m2 / tot).astype(self.var.dtype)
        self.count = tot

    def __call__(self, x):
        std = np.sqrt(self.var + 1e-8)
        return np.clip((x - self.mean) / std, -NORM_CLIP, NORM_CLIP)


@dataclass
class PolicyConfig:
    hidden: tuple = (64, 64)
    lstm_size: int = 64
    use_lstm: bool = True
    log_std_init: float = -1.0
    out_init: float = 1e-12


class ActorCritic:
    """MLP trunk, optional LSTM cell, Gaussian actor head and value head."""

    def __init__(self, obs_dim: int, act_dim: int, cfg: PolicyConfig | None = None,
                 seed: int = 0, dtype=np.float32):
        self.cfg = cfg or PolicyConfig()
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.in_dim = obs_dim + act_dim + 1
        self.dtype = np.dtype(dtype)
        self.norm = RunningNorm(self.in_dim, self.dtype)
        rng = np.random.default_rng(seed)
        self.params = self._init_params(rng)

    @property
    def use_lstm(self) -> bool:
        return self.cfg.use_lstm

    @property
    def state_size(self) -> int:
        return self.cfg.lstm_size if self.use_lstm else 0

    def _init_params(self, rng):
        h1, h2 = self.cfg.hidden
        p = {}

        def glorot(n_in, n_out):
            lim = math.sqrt(6.0 / (n_in + n_out))
            return rng.uniform(-lim, lim, size=(n_in, n_out))

        p["W1"], p["b1"] = glorot(self.in_dim, h1), np.zeros(h1)
        p["g1"], p["s1"] = np.ones(h1), np.zeros(h1)
        p["W2"], p["b2"] = glorot(h1, h2), np.zeros(h2)
        p["g2"], p["s2"] = np.ones(h2), np.zeros(h2)
        out_in = h2
        if self.use_lstm:
            n = self.cfg.lstm_size
            p["Wx"] = glorot(h2, 4 * n)
            p["Wh"] = glorot(n, 4 * n)
            b = np.zeros(4 * n)
            b[n:2 * n] = 1.0  # forget gate
            p["bl"] = b
            out_in = n
        eps = self.cfg.out_init
        p["Wa"] = rng.uniform(-eps, eps, size=(out_in, self.act_dim))
        p["ba"] = np.zeros(self.act_dim)
        p["Wv"] = rng.uniform(-eps, eps, size=(out_in, 1))
        p["bv"] = np.zeros(1)
        p["log_std"] = np.full(self.act_dim, self.cfg.log_std_init)
        return {k: v.astype(self.dtype) for k, v in p.items()}

    # ------------------------------------------------------------------ state

    def initial_state(self, batch: int):
        n = self.state_size
        return np.zeros((batch, n), self.dtype), np.zeros((batch, n), self.dtype)

    def log_std(self):
        return np.clip(self.params["log_std"], LOG_STD_MIN, LOG_STD_MAX)

    def make_input(self, obs, prev_action, prev_reward):
        obs = np.asarray(obs, dtype=self.dtype)
        prev_action = np.asarray(prev_action, dtype=self.dtype)
        prev_reward = np.asarray(prev_reward, dtype=self.dtype)
        if obs.shape[-1] != self.obs_dim or prev_action.shape[-1] != self.act_dim:
            raise ValueError(
                f"input shape mismatch: obs {obs.shape}, action {prev_action.shape}, "
                f"expected last dims {self.obs_dim} and {self.act_dim}")
        return np.concatenate([obs, prev_action, prev_reward[..., None]], axis=-1)

    # ---------------------------------------------------------------- forward

    def forward(self, x, state, resets=None):
        """Run a (T, B, in_dim) input sequence.

        ``state`` is the (h, c) pair at the start of the sequence and
        ``resets[t, b]`` zeroes the recurrent state before step ``t``.
        Returns ``(mean, log_std, value, new_state, cache)``.
        """
        p = self.params
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 3 or x.shape[-1] != self.in_dim:
            raise ValueError(f"expected input of shape (T, B, {self.in_dim}), got {x.shape}")
        T, B, _ = x.shape
        xn = self.norm(x).astype(self.dtype)
        a1 = xn @ p["W1"] + p["b1"]
        n1, inv1 = layer_norm(a1)
        h1 = np.tanh(n1 * p["g1"] + p["s1"])
        a2 = h1 @ p["W2"] + p["b2"]
        n2, inv2 = layer_norm(a2)
        h2 = np.tanh(n2 * p["g2"] + p["s2"])
        cache = {"xn": xn, "n1": n1, "inv1": inv1, "h1": h1, "n2": n2, "inv2": inv2, "h2": h2}

        if self.use_lstm:
            n = self.cfg.lstm_size
            h, c = (np.asarray(s, dtype=self.dtype) for s in state)
            keep = None if resets is None else (1.0 - np.asarray(resets, dtype=self.dtype))[..., None]
            zx = h2 @ p["Wx"] + p["bl"]
            hs = np.empty((T, B, n), self.dtype)
            steps = []
            for t in range(T):
                if keep is not None:
                    h, c = h * keep[t], c * keep[t]
                z = zx[t] + h @ p["Wh"]
                i = _sigmoid(z[:, :n])
                f = _sigmoid(z[:, n:2 * n])
                g = np.tanh(z[:, 2 * n:3 * n])
                o = _sigmoid(z[:, 3 * n:])
                c_new = f * c + i * g
                tc = np.tanh(c_new)
                steps.append((h, c, i, f, g, o, tc))
                h, c = o * tc, c_new
                hs[t] = h
            cache.update(steps=steps, keep=keep)
            out = hs
            new_state = (h, c)
        else:
            out = h2
            new_state = state
        cache["out"] = out
        mean = np.tanh(out @ p["Wa"] + p["ba"])
        value = (out @ p["Wv"] + p["bv"])[..., 0]
        cache["mean"] = mean
        return mean, self.log_std(), value, new_state, cache

    def step(self, obs, prev_action, prev_reward, state):
        """Single-timestep forward for a batch of environments."""
        x = self.make_input(obs, prev_action, prev_reward)[None]
        mean, log_std, value, state, _ = self.forward(x, state)
        return mean[0], log_std, value[0], state

    # --------------------------------------------------------------- backward

    def backward(self, cache, dmean, dvalue):
        """Gradients of a scalar loss given dL/dmean (T,B,A) and dL/dvalue (T,B).

        The log-std gradient depends only on the loss and is left to the
        caller; the returned dict has a zero entry for it.
        """
        p = self.params
        out = cache["out"]
        dza = np.asarray(dmean, dtype=self.dtype) * (1.0 - cache["mean"] ** 2)
        dv = np.asarray(dvalue, dtype=self.dtype)[..., None]
        g = {k: np.zeros_like(v) for k, v in p.items()}
        flat_out = out.reshape(-1, out.shape[-1])
        g["Wa"] = flat_out.T @ dza.reshape(-1, self.act_dim)
        g["ba"] = dza.reshape(-1, self.act_dim).sum(0)
        g["Wv"] = flat_out.T @ dv.reshape(-1, 1)
        g["bv"] = dv.reshape(-1, 1).sum(0)
        dout = dza @ p["Wa"].T + dv @ p["Wv"].T

        if self.use_lstm:
            n = self.cfg.lstm_size
            steps, keep = cache["steps"], cache["keep"]
            T = len(steps)
            dz_all = np.empty(out.shape[:2] + (4 * n,), self.dtype)
            dh_next = np.zeros_like(out[0])
            dc_next = np.zeros_like(out[0])
            for t in range(T - 1, -1, -1):
                h_prev, c_prev, i, f, gg, o, tc = steps[t]
                dh = dout[t] + dh_next
                do = dh * tc
                dc = dh * o * (1.0 - tc ** 2) + dc_next
                di, df, dg = dc * gg, dc * c_prev, dc * i
                dz = np.concatenate([
                    di * i * (1.0 - i),
                    df * f * (1.0 - f),
                    dg * (1.0 - gg ** 2),
                    do * o * (1.0 - o),
                ], axis=1)
                dz_all[t] = dz
                g["Wh"] += h_prev.T @ dz
                dh_next = dz @ p["Wh"].T
                dc_next = dc * f
                if keep is not None:
                    dh_next = dh_next * keep[t]
                    dc_next = dc_next * keep[t]
            flat_dz = dz_all.reshape(-1, 4 * n)
            g["Wx"] = cache["h2"].reshape(-1, cache["h2"].shape[-1]).T @ flat_dz
            g["bl"] = flat_dz.sum(0)
            dh2 = dz_all @ p["Wx"].T
        else:
            dh2 = dout

        h1, h2 = cache["h1"], cache["h2"]
        dpre2 = dh2 * (1.0 - h2 ** 2)
        g["g2"] = (dpre2 * cache["n2"]).reshape(-1, h2.shape[-1]).sum(0)
        g["s2"] = dpre2.reshape(-1, h2.shape[-1]).sum(0)
        da2 = layer_norm_backward(dpre2 * p["g2"], cache["n2"], cache["inv2"])
        g["W2"] = h1.reshape(-1, h1.shape[-1]).T @ da2.reshape(-1, da2.shape[-1])
        g["b2"] = da2.reshape(-1, da2.shape[-1]).sum(0)
        dh1 = da2 @ p["W2"].T
        dpre1 = dh1 * (1.0 - h1 ** 2)
        g["g1"] = (dpre1 * cache["n1"]).reshape(-1, h1.shape[-1]).sum(0)
        g["s1"] = dpre1.reshape(-1, h1.shape[-1]).sum(0)
        da1 = layer_norm_backward(dpre1 * p["g1"], cache["n1"], cache["inv1"])
        xn = cache["xn"]
        g["W1"] = xn.reshape(-1, xn.shape[-1]).T @ da1.reshape(-1, da1.shape[-1])
        g["b1"] = da1.reshape(-1, da1.shape[-1]).sum(0)
        return g

    # ------------------------------------------------------------------ misc

    def copy(self) -> "ActorCritic":
        other = ActorCritic.__new__(ActorCritic)
        other.__dict__.update(self.__dict__)
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.norm = RunningNorm(self.in_dim, self.norm.mean.dtype)
        other.norm.mean, other.norm.var, other.norm.count = self.norm.mean.copy(), self.norm.var.copy(), self.norm.count
        return other

    def astype(self, dtype) -> "ActorCritic":
        other = self.copy()
        other.dtype = np.dtype(dtype)
        other.params = {k: v.astype(dtype) for k, v in other.params.items()}
        other.norm.mean, other.norm.var = other.norm.mean.astype(dtype), other.norm.var.astype(dtype)
        return other

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def summary(self) -> str:
        lines = [f"ActorCritic obs_dim={self.obs_dim} act_dim={self.act_dim} "
                 f"hidden={tuple(self.cfg.hidden)} lstm={self.use_lstm} "
                 f"lstm_size={self.cfg.lstm_size if self.use_lstm else 0}"]
        for k, v in self.params.items():
            lines.append(f"  {k:8s} {str(v.shape):14s} {v.size}")
        lines.append(f"  total parameters: {self.n_params()}")
        return "\n".join(lines)


def sample_action(mean, log_std, rng: np.random.Generator):
    """Gaussian sample around ``mean``; returns (clipped action, raw sample, log_prob).

    The log-probability is that of the raw (pre-clip) sample.
    """
    mean = np.asarray(mean, dtype=np.float64)
    std = np.exp(np.asarray(log_std, dtype=np.float64))
    raw = mean + std * rng.standard_normal(mean.shape)
    return np.clip(raw, -1.0, 1.0), raw, gaussian_log_prob(raw, mean, log_std)


def gaussian_log_prob(x, mean, log_std):
    log_std = np.asarray(log_std, dtype=np.float64)
    z = (np.asarray(x, dtype=np.float64) - mean) / np.exp(log_std)
    return (-0.5 * z * z - log_std - 0.5 * math.log(2 * math.pi)).sum(-1)


def gaussian_entropy(log_std) -> float:
    return float(np.sum(np.asarray(log_std) + 0.5 * math.log(2 * math.pi * math.e)))


# ------------------------------------------------------------- serialisation

def save(net: ActorCritic, path) -> None:
    """Write a checkpoint: magic/version line, JSON manifest line, float32 LE payload.

    A human-readable summary is written next to it as ``<path>.txt``.
    """
    path = Path(path)
    arrays = dict(net.params)
    arrays["norm.mean"] = net.norm.mean
    arrays["norm.var"] = net.norm.var
    manifest = {
        "obs_dim": net.obs_dim,
        "act_dim": net.act_dim,
        "hidden": list(net.cfg.hidden),
        "lstm_size": net.cfg.lstm_size,
        "use_lstm": net.cfg.use_lstm,
        "log_std_init": net.cfg.log_std_init,
        "out_init": net.cfg.out_init,
        "norm_count": net.norm.count,
        "arrays": [[k, list(v.shape)] for k, v in arrays.items()],
    }
    payload = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in arrays.values())
    with open(path, "wb") as fh:
        fh.write(f"{MAGIC} v{FORMAT_VERSION}\n".encode())
        fh.write((json.dumps(manifest) + "\n").encode())
        fh.write(payload)
    path.with_name(path.name + ".txt").write_text(net.summary() + "\n")


def load(path) -> ActorCritic:
    with open(path, "rb") as fh:
        head = fh.readline().decode().strip()
        if head != f"{MAGIC} v{FORMAT_VERSION}":
            raise ValueError(f"{path}: not a policy checkpoint (header {head!r})")
        manifest = json.loads(fh.readline().decode())
        payload = fh.read()
    cfg = PolicyConfig(hidden=tuple(manifest["hidden"]), lstm_size=manifest["lstm_size"],
                       use_lstm=manifest["use_lstm"], log_std_init=manifest["log_std_init"],
                       out_init=manifest["out_init"])
    net = ActorCritic(manifest["obs_dim"], manifest["act_dim"], cfg)
    offset = 0
    for name, shape in manifest["arrays"]:
        n = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=offset).reshape(shape)
        offset += 4 * n
        if name.startswith("norm."):
            setattr(net.norm, name[5:], arr.astype(np.float32))
        else:
            net.params[name] = arr.astype(np.float32)
    if offset != len(payload):
        raise ValueError(f"{path}: payload size mismatch")
    net.norm.count = manifest["norm_count"]
    return net
