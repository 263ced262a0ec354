"""Layered TOML configuration with dotted-path overrides.

Every key has a default taken from the dataclass defaults.  Files and
overrides are merged on top; keys that do not exist in the default tree
are rejected, and values must keep the type of their default.
"""
from __future__ import annotations

import copy
import dataclasses
from importlib import resources
from pathlib import Path

import tomli_w

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .actuation import ActuatorRateConfig, MixerConfig
from .env import (
    YAW_REWARD,
    BlimpEnvConfig,
    NoiseConfig,
    ObsScale,
    PidGains,
    RandomizationConfig,
    RewardConfig,
    YawEnvConfig,
)
from .evaluation import EvalConfig
from .policy import PolicyConfig
from .ppo import PpoConfig
from .sim import SimConfig

PRESETS = ("paper", "desk", "smoke")


class ConfigError(ValueError):
    pass


def _plain(obj):
    """Dataclass instance -> TOML-ready dict (tuples become lists)."""
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            v = _plain(v)
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out


def _build(cls, values: dict):
    kw = {}
    for f in dataclasses.fields(cls):
        if f.name in values:
            v = values[f.name]
            kw[f.name] = tuple(v) if isinstance(v, list) else v
    return cls(**kw)


def default_tree() -> dict:
    blimp = BlimpEnvConfig()
    yaw = YawEnvConfig()
    mixer = MixerConfig()
    ev = _plain(EvalConfig())
    ev.update(train_eval_every=5, train_eval_episodes=10)
    return {
        "run": {"task": "yaw", "seed": 0, "checkpoint": "", "trajectory": "square"},
        "sim": _plain(SimConfig()),
        "actuation": {
            "mixer": mixer.kind,
            "alpha": mixer.alpha,
            "beta": mixer.beta,
            "rate": list(ActuatorRateConfig().c),
            "yaw_rate": yaw.rate,
            "yaw_pid": list(yaw.pid),
            "blimp_pid": _plain(PidGains()),
        },
        "env": {
            "horizon": blimp.horizon,
            "yaw_horizon": yaw.horizon,
            "policy_hz": blimp.policy_hz,
            "desired_speed": blimp.desired_speed,
            "n_waypoints": blimp.n_waypoints,
            "waypoint_distance": list(blimp.waypoint_distance),
            "waypoint_dz": list(blimp.waypoint_dz),
            "reward": _plain(RewardConfig()),
            "yaw_reward": _plain(YAW_REWARD),
            "noise": _plain(NoiseConfig()),
            "scale": _plain(ObsScale()),
            "randomization": _plain(RandomizationConfig()),
        },
        "policy": _plain(PolicyConfig()),
        "ppo": _plain(PpoConfig()),
        "eval": ev,
        "ablation": {
            "lstm": [True, False],
            "mixers": ["absolute", "relative", "hybrid"],
            "pids": ["good", "poor"],
            "seeds": [0, 1, 2],
        },
    }


def _check_type(path: str, default, value):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    elif isinstance(default, dict):
        ok = isinstance(value, dict)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{path}: expected {type(default).__name__}, got {value!r}")
    return float(value) if isinstance(default, float) else value


def merge(base: dict, layer: dict, prefix: str = "") -> dict:
    """Return ``base`` updated with ``layer``; unknown keys raise ConfigError."""
    out = copy.deepcopy(base)
    for k, v in layer.items():
        path = f"{prefix}{k}"
        if k not in out:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(out[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{path}: expected a table")
            out[k] = merge(out[k], v, path + ".")
        else:
            out[k] = _check_type(path, out[k], v)
    return out


def parse_override(text: str) -> dict:
    """``a.b.c=value`` -> nested dict; the value is parsed as a TOML literal."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key or any(not part for part in key.split(".")):
        raise ConfigError(f"bad override key {key!r}")
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    node = value
    for part in reversed(key.split(".")):
        node = {part: node}
    return node


def load_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    with open(path, "rb") as fh:
        try:
            return tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc


def load_preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}, expected one of {PRESETS}")
    text = resources.files("blimprl.presets").joinpath(f"{name}.toml").read_text()
    return tomllib.loads(text)


def resolve(files=(), overrides=(), presets=()) -> dict:
    """Defaults, then presets, then files, then dotted overrides."""
    tree = default_tree()
    for name in presets:
        tree = merge(tree, load_preset(name))
    for f in files:
        tree = merge(tree, load_file(f))
    for o in overrides:
        tree = merge(tree, parse_override(o))
    build_all(tree)  # surface value errors early
    return tree


def dump(tree: dict, path) -> None:
    with open(path, "wb") as fh:
        tomli_w.dump(tree, fh)


def dumps(tree: dict) -> str:
    return tomli_w.dumps(tree)


# ------------------------------------------------------------------ builders

def mixer_config(tree: dict) -> MixerConfig | None:
    a = tree["actuation"]
    if a["mixer"] == "none":
        return None
    return MixerConfig(a["mixer"], a["alpha"], a["beta"])


def sim_config(tree: dict) -> SimConfig:
    return SimConfig.from_mapping(tree["sim"])


def blimp_env_config(tree: dict) -> BlimpEnvConfig:
    e, a = tree["env"], tree["actuation"]
    return BlimpEnvConfig(
        sim=sim_config(tree),
        reward=_build(RewardConfig, e["reward"]),
        noise=_build(NoiseConfig, e["noise"]),
        scale=_build(ObsScale, e["scale"]),
        randomization=_build(RandomizationConfig, e["randomization"]),
        pid=_build(PidGains, a["blimp_pid"]),
        mixer=mixer_config(tree),
        rate=ActuatorRateConfig(tuple(a["rate"])),
        horizon=e["horizon"],
        policy_hz=e["policy_hz"],
        desired_speed=e["desired_speed"],
        n_waypoints=e["n_waypoints"],
        waypoint_distance=tuple(e["waypoint_distance"]),
        waypoint_dz=tuple(e["waypoint_dz"]),
    )


def yaw_env_config(tree: dict) -> YawEnvConfig:
    e, a = tree["env"], tree["actuation"]
    return YawEnvConfig(
        sim=sim_config(tree),
        reward=_build(RewardConfig, e["yaw_reward"]),
        noise=_build(NoiseConfig, e["noise"]),
        scale=_build(ObsScale, e["scale"]),
        randomization=_build(RandomizationConfig, e["randomization"]),
        pid=tuple(a["yaw_pid"]),
        mixer=mixer_config(tree),
        rate=a["yaw_rate"],
        horizon=e["yaw_horizon"],
        policy_hz=e["policy_hz"],
    )


def env_config(tree: dict, task: str | None = None):
    task = task or tree["run"]["task"]
    if task == "yaw":
        return yaw_env_config(tree)
    if task == "blimp":
        return blimp_env_config(tree)
    raise ConfigError(f"unknown task {task!r}, expected 'yaw' or 'blimp'")


def policy_config(tree: dict) -> PolicyConfig:
    return _build(PolicyConfig, tree["policy"])


def ppo_config(tree: dict) -> PpoConfig:
    return _build(PpoConfig, tree["ppo"])


def eval_config(tree: dict) -> EvalConfig:
    return _build(EvalConfig, tree["eval"])


def build_all(tree: dict):
    try:
        return (env_config(tree), policy_config(tree), ppo_config(tree), eval_config(tree))
    except (ValueError, TypeError, KeyError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
