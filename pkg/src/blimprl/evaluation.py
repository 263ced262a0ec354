"""Evaluation protocol: fixed trajectories, wind/buoyancy grid, reward tables, ablations."""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .actuation import MixerConfig
from .env import (
    REWARD_NAMES,
    BlimpEnv,
    BlimpEnvConfig,
    PathSpec,
    RandomizationConfig,
    YawEnvConfig,
    episode_log_row,
    make_env,
)
from .policy import ActorCritic, PolicyConfig, sample_action
from .ppo import CURVE_COLUMNS, PpoConfig, train
from .sim import EnvParams, write_trajectory_csv

REPORT_COLUMNS = ["trajectory", "wind_speed", "buoyancy", "controller", "r",
                  *(f"r_{k}" for k in REWARD_NAMES), "runs", "steps"]
GOOD_PID = (1.0, 0.0, 0.5)
POOR_PID = (1.0, 0.0, 0.0)


# --------------------------------------------------------------- trajectories

def gen_square(edge: float = 80.0, altitude: float = 0.0, speed: float = 3.0) -> PathSpec:
    """Four corners of a square starting one edge north of the origin, closing at the origin."""
    e = float(edge)
    pts = np.array([[e, 0.0, altitude], [e, e, altitude], [0.0, e, altitude], [0.0, 0.0, altitude]])
    return PathSpec(pts, np.full(4, speed))


def gen_coil(radius: float = 30.0, n: int = 15, dtheta: float = math.radians(45.0),
             dz: float = 2.0, altitude: float = 0.0, speed: float = 3.0) -> PathSpec:
    """Climbing helix around the origin; each waypoint rises ``dz`` meters (NED z decreases)."""
    if n < 1:
        raise ValueError("a coil needs at least one waypoint")
    k = np.arange(n)
    pts = np.stack([radius * np.cos(k * dtheta), radius * np.sin(k * dtheta), altitude - k * dz], axis=1)
    return PathSpec(pts, np.full(n, speed))


COIL_PRESETS = {
    "coil": dict(dtheta=math.radians(45.0)),  # angular spacing as stated
    "coil90": dict(dtheta=math.radians(90.0)),  # reproduces the stated 42.4 m planar spacing
}


@dataclass(frozen=True)
class TrajectorySpec:
    kind: str = "square"
    edge: float = 80.0
    radius: float = 30.0
    n: int = 15
    dtheta_deg: float = 45.0
    dz: float = 2.0
    speed: float = 3.0

    def build(self) -> PathSpec:
        if self.kind == "square":
            return gen_square(self.edge, speed=self.speed)
        if self.kind == "coil":
            return gen_coil(self.radius, self.n, math.radians(self.dtheta_deg), self.dz, speed=self.speed)
        raise ValueError(f"unknown trajectory kind {self.kind!r}")


def trajectory(name: str, edge: float = 80.0) -> TrajectorySpec:
    """Named presets: ``square``, ``square40``, ``coil`` (45 deg) and ``coil90``."""
    presets = {
        "square": TrajectorySpec("square", edge=edge),
        "square40": TrajectorySpec("square", edge=40.0),
        "coil": TrajectorySpec("coil", dtheta_deg=45.0),
        "coil90": TrajectorySpec("coil", dtheta_deg=90.0),
    }
    if name not in presets:
        raise ValueError(f"unknown trajectory {name!r}, expected one of {sorted(presets)}")
    return presets[name]


# ------------------------------------------------------------------- episodes

@dataclass
class EpisodeResult:
    total: float
    components: np.ndarray  # summed over steps
    steps: int
    rows: list = field(default_factory=list)
    states: list = field(default_factory=list)


def run_episode(env, net: ActorCritic | None, seed: int, deterministic: bool = True,
                record: bool = False, rng: np.random.Generator | None = None) -> EpisodeResult:
    """Roll out one episode; ``net=None`` sends a zero residual (PID only)."""
    obs = env.reset(seed)
    prev_a = np.zeros(env.act_dim)
    prev_r = 0.0
    state = net.initial_state(1) if net is not None else None
    rng = rng or np.random.default_rng(seed)
    total, comps, steps = 0.0, np.zeros(len(REWARD_NAMES)), 0
    rows, states = [], []
    done = False
    while not done:
        if net is None:
            a = np.zeros(env.act_dim)
        else:
            mean, log_std, _, state = net.step(obs[None], prev_a[None], np.array([prev_r]), state)
            mean = mean[0].astype(np.float64)
            a = np.clip(mean, -1.0, 1.0) if deterministic else sample_action(mean, log_std, rng)[0]
        obs, r, done, info = env.step(a)
        total += r
        comps += info["reward_components"]
        steps += 1
        if record:
            rows.append(episode_log_row(obs, r, info))
            states.append(info["state"])
        prev_a, prev_r = a, r
    return EpisodeResult(total, comps, steps, rows, states)


def evaluate_returns(task: str, env_cfg, net: ActorCritic | None, seeds, deterministic=True) -> np.ndarray:
    """Episode returns on a fixed seed list."""
    out = []
    for s in seeds:
        env = make_env(task, env_cfg)
        out.append(run_episode(env, net, int(s), deterministic).total)
    return np.array(out)


def pid_only(env_cfg):
    return replace(env_cfg, mixer=None)


def relative_improvement(value: float, baseline: float) -> float:
    return (value - baseline) / abs(baseline)


def max_drop(curve, baseline: float) -> float:
    """Largest relative shortfall of a return curve below ``baseline`` (0 if never below)."""
    vals = np.asarray([v for v in curve if np.isfinite(v)])
    if vals.size == 0:
        return 0.0
    return float(max(0.0, np.max((baseline - vals) / abs(baseline))))


# ------------------------------------------------------------- Table-III grid

@dataclass(frozen=True)
class EvalConfig:
    runs: int = 7
    duration: float = 1800.0  # seconds of simulated flight per run
    wind_speeds: tuple = (0.0, 0.5, 1.0)
    buoyancies: tuple = (0.93, 1.07)
    trajectories: tuple = ("square", "coil")
    buoyancy_trajectory: str = "square"
    controllers: tuple = ("drrl", "pid")
    square_edge: float = 80.0
    seed: int = 0
    desk: bool = False

    def __post_init__(self):
        if self.runs < 1:
            raise ValueError("runs must be at least 1")
        if not self.duration > 0:
            raise ValueError(f"duration must be positive to average rewards, got {self.duration}")


DESK_EVAL = dict(runs=3, duration=300.0, desk=True)


@dataclass
class ReportRow:
    trajectory: str
    wind_speed: float
    buoyancy: float
    controller: str
    r: float
    components: np.ndarray
    runs: int
    steps: int

    def as_list(self) -> list:
        return [self.trajectory, self.wind_speed, self.buoyancy, self.controller, self.r,
                *self.components.tolist(), self.runs, self.steps]


def _eval_env_cfg(env_cfg: BlimpEnvConfig, controller: str, duration: float) -> BlimpEnvConfig:
    horizon = int(round(duration * env_cfg.policy_hz))
    if horizon < 1:
        raise ValueError(f"duration {duration} s gives no policy steps; nothing to average")
    cfg = replace(env_cfg, horizon=horizon, randomization=RandomizationConfig(enabled=False))
    if controller == "pid":
        cfg = pid_only(cfg)
    elif controller != "drrl":
        raise ValueError(f"unknown controller {controller!r}, expected 'drrl' or 'pid'")
    return cfg


def run_eval(controller: str, net: ActorCritic | None, traj: TrajectorySpec, wind_speed: float,
             buoyancy: float, runs: int = 7, duration: float = 1800.0,
             env_cfg: BlimpEnvConfig | None = None, seed: int = 0, dump_dir=None) -> ReportRow:
    """Average per-step reward and components over ``runs`` looped flights.

    The wind keeps ``wind_speed`` but its direction is drawn uniformly for
    every run.
    """
    if runs < 1:
        raise ValueError("runs must be at least 1")
    if not duration > 0:
        raise ValueError(f"duration must be positive to average rewards, got {duration}")
    if controller == "drrl" and net is None:
        raise ValueError("the drrl controller needs a policy")
    cfg = _eval_env_cfg(env_cfg or BlimpEnvConfig(), controller, duration)
    rng = np.random.default_rng([seed, int(round(wind_speed * 1000)), int(round(buoyancy * 1000))])
    total, comps, steps = 0.0, np.zeros(len(REWARD_NAMES)), 0
    for k in range(runs):
        phi = rng.uniform(-math.pi, math.pi)
        params = EnvParams(wind_xy=(wind_speed * math.cos(phi), wind_speed * math.sin(phi)),
                           buoyancy=buoyancy)
        env = BlimpEnv(cfg, path=traj.build(), env_params=params, loop=True)
        res = run_episode(env, net if controller == "drrl" else None,
                          int(rng.integers(2 ** 31)), record=dump_dir is not None)
        if not np.isfinite(res.total):
            raise FloatingPointError(f"non-finite return in {controller} run {k}")
        total += res.total
        comps += res.components
        steps += res.steps
        if dump_dir is not None:
            name = f"{traj.kind}_w{wind_speed:g}_b{buoyancy:g}_{controller}_run{k}.csv"
            write_trajectory_csv(Path(dump_dir) / name, res.states)
    if steps == 0:
        raise ValueError("evaluation produced no steps; nothing to average")
    return ReportRow(traj.kind, wind_speed, buoyancy, controller, float(total / steps), comps / steps, runs, steps)


def run_grid(net: ActorCritic | None, cfg: EvalConfig, env_cfg: BlimpEnvConfig | None = None,
             progress=None, dump_dir=None) -> list:
    """Wind sweep over both trajectories plus the buoyancy rows, in table order."""
    rows = []
    conditions = [(t, w, 1.0) for t in cfg.trajectories for w in cfg.wind_speeds]
    conditions += [(cfg.buoyancy_trajectory, 0.0, b) for b in cfg.buoyancies]
    for traj_name, wind, buoy in conditions:
        for ctrl in cfg.controllers:
            row = run_eval(ctrl, net, trajectory(traj_name, cfg.square_edge), wind, buoy,
                           cfg.runs, cfg.duration, env_cfg, cfg.seed, dump_dir)
            rows.append(row)
            if progress is not None:
                progress(row)
    return rows


def emit_table(rows: list, csv_path=None, header_note: str = "") -> str:
    """Write the report CSV and return an aligned text table with the same columns."""
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            if header_note:
                fh.write(f"# {header_note}\n")
            w = csv.writer(fh)
            w.writerow(REPORT_COLUMNS)
            for row in rows:
                w.writerow([repr(float(v)) if isinstance(v, float) else v for v in row.as_list()])
    head = ["trajectory", "wind", "buoy", "ctrl", "r", "r_succ", "r_track", "r_act", "r_bonus"]
    lines = [header_note] if header_note else []
    lines.append("  ".join(f"{h:>10s}" for h in head))
    for row in rows:
        vals = [row.trajectory, f"{row.wind_speed:g}", f"{row.buoyancy:g}", row.controller,
                *(f"{v:.4f}" for v in (row.r, *row.components))]
        lines.append("  ".join(f"{v:>10s}" for v in vals))
    return "\n".join(lines)


# ------------------------------------------------------------------ ablation

ABLATION_COLUMNS = ["lstm", "mixer", "pid", "seed", *CURVE_COLUMNS]


def yaw_config(pid=GOOD_PID, mixer: str | None = "hybrid", base: YawEnvConfig | None = None) -> YawEnvConfig:
    base = base or YawEnvConfig()
    return replace(base, pid=tuple(pid), mixer=None if mixer is None else replace(
        base.mixer or MixerConfig(), kind=mixer))


def eval_seeds(n: int, offset: int = 10_000) -> list:
    return list(range(offset, offset + n))


def train_with_eval(task: str, env_cfg, policy_cfg: PolicyConfig, ppo_cfg: PpoConfig,
                    eval_every: int = 5, eval_episodes: int = 10, out_dir=None, progress=None):
    """Train while recording deterministic returns on fixed seeds every ``eval_every`` iterations.

    Returns ``(TrainResult, initial, eval_curve)``: ``initial`` is the mean
    return of the untrained policy and ``eval_curve`` has one entry per
    iteration (NaN where no evaluation ran).
    """
    seeds = eval_seeds(eval_episodes)
    eval_curve = []

    def hook(row, net):
        it = row["iteration"]
        value = float("nan")
        if eval_every and (it % eval_every == eval_every - 1 or it == ppo_cfg.iterations - 1):
            value = float(evaluate_returns(task, env_cfg, net, seeds).mean())
        row["eval_return"] = value
        eval_curve.append(value)
        if progress is not None:
            progress(row)

    initial = None
    if eval_every:
        probe = make_env(task, env_cfg)
        fresh = ActorCritic(probe.obs_dim, probe.act_dim, policy_cfg, seed=ppo_cfg.seed)
        initial = float(evaluate_returns(task, env_cfg, fresh, seeds).mean())
    result = train(task, env_cfg, policy_cfg, ppo_cfg, out_dir=out_dir, progress=hook)
    return result, initial, eval_curve


def run_ablation(axes=None, seeds=(0, 1, 2), ppo_cfg: PpoConfig | None = None,
                 policy_cfg: PolicyConfig | None = None, base: YawEnvConfig | None = None,
                 out_path=None, eval_every: int = 5, eval_episodes: int = 10, progress=None) -> list:
    """Train the yaw task over {lstm} x {mixer} x {pid} x seeds; returns curve rows."""
    axes = axes or {"lstm": (True, False), "mixer": ("absolute", "relative", "hybrid"),
                    "pid": ("good", "poor")}
    ppo_cfg = ppo_cfg or PpoConfig()
    policy_cfg = policy_cfg or PolicyConfig()
    gains = {"good": GOOD_PID, "poor": POOR_PID}
    rows = []
    for lstm, mixer, pid, seed in itertools.product(axes["lstm"], axes["mixer"], axes["pid"], seeds):
        env_cfg = yaw_config(gains[pid], mixer, base)
        res, _, _ = train_with_eval("yaw", env_cfg, replace(policy_cfg, use_lstm=lstm),
                                    replace(ppo_cfg, seed=seed), eval_every, eval_episodes)
        for row in res.curve:
            rows.append({"lstm": int(lstm), "mixer": mixer, "pid": pid, "seed": seed, **row})
        if progress is not None:
            progress(lstm, mixer, pid, seed, res)
    if out_path is not None:
        with open(out_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
            w.writeheader()
            for row in rows:
                w.writerow({k: repr(float(v)) if isinstance(v, float) else v for k, v in row.items()})
    return rows
