"""Blimp-control and yaw-control MDPs behind a reset/step protocol."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .actuation import PID, ActuatorRateConfig, MixerConfig, mix, update_actuators
from .sim import (
    BlimpState,
    EnvParams,
    SimConfig,
    body_frame_target,
    expand_actuators,
    relative_yaw_next,
    step_dynamics,
    wrap_angle,
)

BLIMP_OBS_NAMES = (
    "l_r", "psi_r", "z_r", "v_r", "v_o", "w", "omega_psi", "v_air", "psi_r_next",
    "act_m1", "act_n0", "act_f2", "act_f0",
    "pid_thrust", "pid_servo", "pid_yaw", "pid_alt",
)
YAW_OBS_NAMES = ("psi_r", "omega_psi", "pid_yaw")
REWARD_NAMES = ("success", "track", "act", "bonus")


@dataclass(frozen=True)
class RewardConfig:
    weights: tuple = (100.0, 0.9, 0.1, 0.1)  # success, track, act, bonus
    track: tuple = (0.6, 0.2, 0.1, 0.1)  # |z_r|, |l_r|, |psi_r|, |v_r|
    act: tuple = (0.5, 1.0)  # tail motor, main motors
    bonus: float = 1.0
    epsilon: float = 5.0
    scale: float = 0.05
    success_time: float = 5.0  # yaw task only

    def __post_init__(self):
        for name in ("weights", "track", "act"):
            if any(v < 0 for v in getattr(self, name)):
                raise ValueError(f"reward {name} must be non-negative")
        if self.bonus < 0 or self.scale < 0:
            raise ValueError("reward bonus and scale must be non-negative")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


YAW_REWARD = RewardConfig(weights=(1.0, 1.0, 0.0, 0.0), epsilon=0.1, scale=0.1)


@dataclass(frozen=True)
class NoiseConfig:
    observation: float = 0.02
    action: float = 0.05

    def __post_init__(self):
        if self.observation < 0 or self.action < 0:
            raise ValueError("noise magnitudes must be non-negative")


@dataclass(frozen=True)
class ObsScale:
    """Full-scale values that map raw quantities onto [-1, 1]."""

    distance: float = 100.0
    angle: float = math.pi
    velocity: float = 5.0
    altitude: float = 50.0
    yaw_rate: float = 1.0


@dataclass(frozen=True)
class RandomizationConfig:
    enabled: bool = True
    wind_xy: tuple = (-1.5, 1.5)
    wind_z: tuple = (-0.15, 0.15)
    buoyancy: tuple = (0.9, 1.1)
    freeflop_angle: tuple = (0.0, 1.5)
    collapse: tuple = (0.0, 0.02)
    deflation_rate: tuple = (0.0, 1.5)


def sample_env_params(rng: np.random.Generator, cfg: RandomizationConfig) -> EnvParams:
    """Draw one set of environment variables uniformly from their ranges."""
    if not cfg.enabled:
        return EnvParams()
    return EnvParams(
        wind_xy=tuple(rng.uniform(*cfg.wind_xy, size=2).tolist()),
        wind_z=float(rng.uniform(*cfg.wind_z)),
        buoyancy=float(rng.uniform(*cfg.buoyancy)),
        freeflop_angle=float(rng.uniform(*cfg.freeflop_angle)),
        collapse=float(rng.uniform(*cfg.collapse)),
        deflation_rate=float(rng.uniform(*cfg.deflation_rate)),
    )


@dataclass
class PathSpec:
    """Ordered waypoints with per-waypoint desired speed and an active index."""

    points: np.ndarray
    speeds: np.ndarray | None = None
    active: int = 0

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if self.points.shape[1] != 3:
            raise ValueError(f"waypoints must be 3-vectors, got shape {self.points.shape}")
        if self.speeds is None:
            self.speeds = np.full(len(self.points), 3.0)
        self.speeds = np.broadcast_to(np.asarray(self.speeds, dtype=float), (len(self.points),)).copy()

    def __len__(self):
        return len(self.points)

    @property
    def done(self) -> bool:
        return self.active >= len(self.points)

    @property
    def current(self):
        return None if self.done else self.points[self.active]

    @property
    def next(self):
        k = self.active + 1
        return self.points[k] if k < len(self.points) else None

    def advance(self):
        if not self.done:
            self.active += 1

    def copy(self) -> "PathSpec":
        return PathSpec(self.points.copy(), self.speeds.copy(), self.active)


def sample_waypoints(rng: np.random.Generator, arena: float, n: int,
                     start: Sequence[float] = (0.0, 0.0, 0.0),
                     distance: tuple = (40.0, 80.0), dz: tuple = (-5.0, 5.0),
                     speed: float = 3.0, max_tries: int = 1000) -> PathSpec:
    """Chain of ``n`` waypoints, each drawn relative to the previous one.

    Planar step length and bearing are uniform, the altitude step is uniform
    in ``dz``; candidates leaving the cube [-arena/2, arena/2]^3 are redrawn.
    """
    half = arena / 2
    prev = np.asarray(start, dtype=float)
    pts = []
    for _ in range(n):
        for _ in range(max_tries):
            d = rng.uniform(*distance)
            bearing = rng.uniform(-math.pi, math.pi)
            cand = prev + np.array([d * math.cos(bearing), d * math.sin(bearing), rng.uniform(*dz)])
            if np.all(np.abs(cand) <= half):
                break
        else:
            raise RuntimeError("could not place a waypoint inside the arena")
        pts.append(cand)
        prev = cand
    return PathSpec(np.array(pts), np.full(n, speed))


def inject_noise(vec, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Add uniform noise of +-fraction per element and re-clip to [-1, 1]."""
    vec = np.asarray(vec, dtype=float)
    if fraction == 0:
        return vec.copy()
    return np.clip(vec + rng.uniform(-fraction, fraction, size=vec.shape), -1.0, 1.0)


def _clip1(x: float) -> float:
    return min(1.0, max(-1.0, x))


def reward_blimp(obs: dict, actuators, l_r_raw: float, success: float,
                 cfg: RewardConfig) -> tuple:
    """Weighted sum of success, tracking, actuation and bonus terms.

    ``obs`` holds the scaled ``z_r``, ``l_r``, ``psi_r``, ``v_r`` and
    ``psi_r_next``; ``actuators`` is the physical 8-vector (m0, m1, m2, ...);
    ``l_r_raw`` is the unscaled planar distance in meters.
    Returns ``(r, components)`` where components is ordered like
    ``REWARD_NAMES``.
    """
    i0, i1, i2, i3 = cfg.track
    j0, j1 = cfg.act
    track = -i0 * abs(obs["z_r"]) - i1 * abs(obs["l_r"]) - i2 * abs(obs["psi_r"]) - i3 * abs(obs["v_r"])
    act = -j0 * abs(actuators[0]) - j1 * abs(actuators[1]) - j1 * abs(actuators[2])
    bonus = -cfg.bonus * abs(obs["psi_r_next"]) / (1.0 + l_r_raw)
    comps = (float(success), track, act, bonus)
    w = cfg.weights
    r = cfg.scale * (w[0] * comps[0] + w[1] * comps[1] + w[2] * comps[2] + w[3] * comps[3])
    return r, comps


def reward_yaw(psi_r: float, timer: int, cfg: RewardConfig, dt: float = 0.1) -> tuple:
    """Yaw-task reward; ``timer`` counts consecutive steps inside the band.

    Returns ``(r, components, timer)``.  Success fires once the band has been
    held for ``cfg.success_time`` seconds.
    """
    timer = timer + 1 if abs(psi_r) <= cfg.epsilon else 0
    success = 1.0 if timer >= round(cfg.success_time / dt) else 0.0
    track = -abs(psi_r)
    comps = (success, track, 0.0, 0.0)
    r = cfg.scale * (cfg.weights[0] * success + cfg.weights[1] * track)
    return r, comps, timer


@dataclass(frozen=True)
class PidGains:
    thrust: tuple = (0.7, 0.01, 0.05)
    yaw: tuple = (0.3, 0.003, 0.0075)
    alt: tuple = (2.0, 0.02, 1.0)


@dataclass(frozen=True)
class BlimpEnvConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    scale: ObsScale = field(default_factory=ObsScale)
    randomization: RandomizationConfig = field(default_factory=RandomizationConfig)
    pid: PidGains = field(default_factory=PidGains)
    mixer: MixerConfig | None = field(default_factory=MixerConfig)
    rate: ActuatorRateConfig = field(default_factory=ActuatorRateConfig)
    horizon: int = 800
    policy_hz: float = 10.0
    desired_speed: float = 3.0
    n_waypoints: int = 8
    waypoint_distance: tuple = (40.0, 80.0)
    waypoint_dz: tuple = (-5.0, 5.0)


class _BaseEnv:
    obs_dim: int
    act_dim: int

    def __init__(self, cfg):
        self.cfg = cfg
        substeps = cfg.sim.dt * cfg.policy_hz
        self.substeps = round(1.0 / substeps)
        if abs(self.substeps * substeps - 1.0) > 1e-9:
            raise ValueError("simulation rate must be an integer multiple of the policy rate")
        self.policy_dt = 1.0 / cfg.policy_hz
        self.done = True
        self.rng = np.random.default_rng(0)
        self.env_params = EnvParams()
        self.override_params: EnvParams | None = None

    def _advance(self, reduced):
        for _ in range(self.substeps):
            self.state = step_dynamics(self.state, reduced, self.env_params, self.cfg.sim)
        self.t += self.policy_dt

    def _check_step(self, action):
        if self.done:
            raise RuntimeError("step() called on a finished episode; call reset()")
        a = np.asarray(action, dtype=float).reshape(-1)
        if a.shape != (self.act_dim,):
            raise ValueError(f"expected action of size {self.act_dim}, got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite action")
        return np.clip(a, -1.0, 1.0)

    def _mix(self, a_pid, a_rl):
        if self.cfg.mixer is None:
            return np.asarray(a_pid, dtype=float).copy()
        return mix(self.cfg.mixer, a_pid, a_rl)


class BlimpEnv(_BaseEnv):
    """Waypoint navigation with joint forward-speed, yaw and altitude control.

    ``cfg.mixer = None`` turns the residual off so the PID drives the
    actuators alone and the agent's action is ignored.  With ``loop=True``
    the path restarts after its last waypoint and only the horizon ends
    the episode.
    """

    obs_dim = 17
    act_dim = 4

    def __init__(self, cfg: BlimpEnvConfig | None = None, path: PathSpec | None = None,
                 env_params: EnvParams | None = None, loop: bool = False):
        super().__init__(cfg or BlimpEnvConfig())
        self.fixed_path = path
        self.override_params = env_params
        self.loop = loop

    def _make_pids(self):
        g = self.cfg.pid
        return PID(*g.thrust), PID(*g.yaw), PID(*g.alt)

    def reset(self, seed=None) -> np.ndarray:
        cfg = self.cfg
        self.rng = np.random.default_rng(seed)
        sampled = sample_env_params(self.rng, cfg.randomization)
        self.env_params = self.override_params or sampled
        if self.fixed_path is not None:
            self.path = self.fixed_path.copy()
            self.path.active = 0
        else:
            self.path = sample_waypoints(self.rng, cfg.sim.arena_size, cfg.n_waypoints,
                                         distance=cfg.waypoint_distance, dz=cfg.waypoint_dz,
                                         speed=cfg.desired_speed)
        self.state = BlimpState()
        self.t = 0.0
        self.steps = 0
        self.pids = self._make_pids()
        self.actuators = np.zeros(4)
        self.a_pid = np.zeros(4)
        self.done = False
        return np.zeros(self.obs_dim)

    def features(self) -> dict:
        """Raw and scaled task quantities for the current state and waypoint."""
        sc = self.cfg.scale
        s = self.state
        wp = self.path.current if not self.path.done else self.path.points[-1]
        l_r, psi_r, z_r = body_frame_target(s, wp)
        k = min(self.path.active, len(self.path) - 1)
        v_g = self.path.speeds[k]
        v_o = s.speed
        raw = {
            "l_r": l_r, "psi_r": psi_r, "z_r": z_r, "v_r": v_g - v_o, "v_o": v_o,
            "w": s.vertical_rate, "omega_psi": s.yaw_rate, "v_air": s.airspeed,
            "psi_r_next": relative_yaw_next(s, self.path.next),
        }
        full = {
            "l_r": sc.distance, "psi_r": sc.angle, "z_r": sc.altitude, "v_r": sc.velocity,
            "v_o": sc.velocity, "w": sc.velocity, "omega_psi": sc.yaw_rate,
            "v_air": sc.velocity, "psi_r_next": sc.angle,
        }
        scaled = {k: _clip1(v / full[k]) for k, v in raw.items()}
        return {"raw": raw, "scaled": scaled}

    def step(self, action):
        a_rl = self._check_step(action)
        cfg = self.cfg
        a_rl_noisy = inject_noise(a_rl, cfg.noise.action, self.rng)
        a_pid = self.a_pid
        a_joint = self._mix(a_pid, a_rl_noisy)
        prev_act = self.actuators
        self.actuators = update_actuators(prev_act, a_joint, cfg.rate)
        self._advance(self.actuators)
        self.steps += 1

        feats = self.features()
        sc, raw = feats["scaled"], feats["raw"]
        success = 0.0
        if raw["l_r"] <= cfg.reward.epsilon:
            success = 1.0
            self.path.advance()
            if self.loop and self.path.done:
                self.path.active = 0
        r, comps = reward_blimp(sc, expand_actuators(self.actuators), raw["l_r"], success, cfg.reward)
        if success and not self.path.done:
            feats = self.features()
            sc = feats["scaled"]

        self.a_pid = pid_action = self._pid(sc)
        clean = np.array([sc[k] for k in BLIMP_OBS_NAMES[:9]]
                         + self.actuators.tolist() + pid_action.tolist())
        obs = inject_noise(clean, cfg.noise.observation, self.rng)
        self.done = self.path.done or self.steps >= cfg.horizon
        info = {
            "t": self.t, "a_pid": a_pid, "a_rl": a_rl, "a_joint": a_joint,
            "reward_components": comps, "success": success,
            "waypoint": self.path.active, "actuators": self.actuators.copy(),
            "state": self.state,
        }
        return obs, r, self.done, info

    def _pid(self, sc) -> np.ndarray:
        thrust, yaw, alt = self.pids
        dt = self.policy_dt
        return np.array([thrust(sc["v_r"], dt), 0.0, yaw(sc["psi_r"], dt), alt(sc["z_r"], dt)])


@dataclass(frozen=True)
class YawEnvConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    reward: RewardConfig = YAW_REWARD
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    scale: ObsScale = field(default_factory=ObsScale)
    randomization: RandomizationConfig = field(default_factory=RandomizationConfig)
    pid: tuple = (1.0, 0.0, 0.5)
    mixer: MixerConfig | None = field(default_factory=MixerConfig)
    rate: float = 0.1
    horizon: int = 300
    policy_hz: float = 10.0


class YawEnv(_BaseEnv):
    """Turn a hovering blimp to a random heading with the tail motor."""

    obs_dim = 3
    act_dim = 1

    def __init__(self, cfg: YawEnvConfig | None = None, target: float | None = None):
        super().__init__(cfg or YawEnvConfig())
        self.fixed_target = target

    def reset(self, seed=None) -> np.ndarray:
        cfg = self.cfg
        self.rng = np.random.default_rng(seed)
        self.env_params = sample_env_params(self.rng, cfg.randomization)
        target = self.rng.uniform(-math.pi, math.pi)
        self.target = wrap_angle(target if self.fixed_target is None else self.fixed_target)
        self.state = BlimpState()
        self.t = 0.0
        self.steps = 0
        self.timer = 0
        self.pid = PID(*cfg.pid)
        self.actuators = np.zeros(4)
        self.a_pid = np.zeros(1)
        self.done = False
        return np.zeros(self.obs_dim)

    def scaled_error(self) -> tuple:
        sc = self.cfg.scale
        psi_r = wrap_angle(self.target - self.state.attitude[2])
        return _clip1(psi_r / sc.angle), _clip1(self.state.yaw_rate / sc.yaw_rate)

    def step(self, action):
        a_rl = self._check_step(action)
        cfg = self.cfg
        a_rl_noisy = inject_noise(a_rl, cfg.noise.action, self.rng)
        a_pid = self.a_pid
        a_joint = self._mix(a_pid, a_rl_noisy)
        act = self.actuators.copy()
        act[2] = update_actuators(act[2:3], a_joint, (cfg.rate,))[0]
        self.actuators = act
        self._advance(act)
        self.steps += 1

        psi_r, omega = self.scaled_error()
        r, comps, self.timer = reward_yaw(psi_r, self.timer, cfg.reward, self.policy_dt)
        self.a_pid = np.array([self.pid(psi_r, self.policy_dt)])
        clean = np.array([psi_r, omega, self.a_pid[0]])
        obs = inject_noise(clean, cfg.noise.observation, self.rng)
        self.done = bool(comps[0]) or self.steps >= cfg.horizon
        info = {
            "t": self.t, "a_pid": a_pid, "a_rl": a_rl, "a_joint": a_joint,
            "reward_components": comps, "success": comps[0],
            "actuators": self.actuators.copy(), "state": self.state,
        }
        return obs, r, self.done, info


def make_env(task: str, cfg=None, **kw):
    if task == "yaw":
        return YawEnv(cfg, **kw)
    if task == "blimp":
        return BlimpEnv(cfg, **kw)
    raise ValueError(f"unknown task {task!r}, expected 'yaw' or 'blimp'")


def episode_log_header(env) -> list:
    names = BLIMP_OBS_NAMES if isinstance(env, BlimpEnv) else YAW_OBS_NAMES
    n = env.act_dim
    cols = ["t", *names]
    for prefix in ("a_pid", "a_rl", "a_joint"):
        cols += [f"{prefix}_{i}" for i in range(n)]
    cols += ["reward", *(f"r_{k}" for k in REWARD_NAMES)]
    return cols


def episode_log_row(obs, reward, info) -> list:
    vals = [info["t"], *np.asarray(obs).tolist(), *np.asarray(info["a_pid"]).tolist(),
            *np.asarray(info["a_rl"]).tolist(), *np.asarray(info["a_joint"]).tolist(),
            reward, *info["reward_components"]]
    return [repr(float(v)) for v in vals]


def write_episode_log(path: str | Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
