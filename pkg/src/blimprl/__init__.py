"""Residual reinforcement learning for blimp control on a reduced-order simulator."""

from .actuation import PID, ActuatorRateConfig, MixerConfig, mix, update_actuators
from .env import BlimpEnv, BlimpEnvConfig, YawEnv, YawEnvConfig, make_env
from .policy import ActorCritic, PolicyConfig
from .ppo import PpoConfig, compute_gae, train
from .sim import BlimpState, EnvParams, SimConfig, step_dynamics

__version__ = "0.1.0"

__all__ = [
    "PID", "ActuatorRateConfig", "MixerConfig", "mix", "update_actuators",
    "BlimpEnv", "BlimpEnvConfig", "YawEnv", "YawEnvConfig", "make_env",
    "ActorCritic", "PolicyConfig", "PpoConfig", "compute_gae", "train",
    "BlimpState", "EnvParams", "SimConfig", "step_dynamics",
]
