"""PID stability provider, residual mixers and the actuator increment map."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

MIXER_KINDS = ("absolute", "relative", "hybrid")


@dataclass
class PID:
    """Discrete PID with conditional-integration anti-windup.

    Output is clipped to [-1, 1].  The derivative is a backward difference
    on the error (zero on the first call) and the integral uses the
    right-rectangle rule.  While the output would saturate the accumulator
    is frozen.
    """

    kp: float
    ki: float = 0.0
    kd: float = 0.0
    integral_limit: float = 1.0
    integral: float = 0.0
    prev_error: float | None = None

    def __post_init__(self):
        if not all(math.isfinite(g) for g in (self.kp, self.ki, self.kd)):
            raise ValueError(f"PID gains must be finite: {(self.kp, self.ki, self.kd)}")

    def __call__(self, error: float, dt: float) -> float:
        if not dt > 0:
            raise ValueError(f"dt must be positive, got {dt}")
        if not math.isfinite(error):
            raise ValueError(f"non-finite PID error {error}")
        deriv = 0.0 if self.prev_error is None else (error - self.prev_error) / dt
        self.prev_error = error
        integral = self.integral + error * dt
        integral = min(self.integral_limit, max(-self.integral_limit, integral))
        out = self.kp * error + self.ki * integral + self.kd * deriv
        if abs(out) <= 1.0:
            self.integral = integral
        else:
            out = self.kp * error + self.ki * self.integral + self.kd * deriv
        return min(1.0, max(-1.0, out))

    def reset(self):
        self.integral = 0.0
        self.prev_error = None

    @property
    def gains(self) -> tuple:
        return (self.kp, self.ki, self.kd)


def pid_eval(gains: PID, error: float, dt: float) -> float:
    return gains(error, dt)


def pid_command(errors: Sequence[float], pids: Sequence[PID], dt: float) -> np.ndarray:
    """PID action in channel order (thrust, servo, yaw, altitude).

    ``errors`` is the scaled triple (v_r, psi_r, z_r) and ``pids`` the
    matching controllers.  The servo channel is never driven by PID.
    """
    v_r, psi_r, z_r = errors
    thrust_pid, yaw_pid, alt_pid = pids
    return np.array([thrust_pid(v_r, dt), 0.0, yaw_pid(psi_r, dt), alt_pid(z_r, dt)])


@dataclass(frozen=True)
class MixerConfig:
    kind: str = "hybrid"
    alpha: float = 0.5
    beta: float = 0.5

    def __post_init__(self):
        if self.kind not in MIXER_KINDS:
            raise ValueError(f"unknown mixer kind {self.kind!r}, expected one of {MIXER_KINDS}")
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    def __call__(self, x, y):
        return mix(self, x, y)


def mix_absolute(x, y, beta):
    return (1.0 - beta) * x + beta * y


def mix_relative(x, y, beta):
    return x * (1.0 + beta * y)


def mix_raw(kind: str, x, y, alpha: float, beta: float):
    """Unclipped mixer value; works elementwise on arrays."""
    if kind == "absolute":
        return mix_absolute(x, y, beta)
    if kind == "relative":
        return mix_relative(x, y, beta)
    if kind == "hybrid":
        return (1.0 - alpha) * mix_absolute(x, y, beta) + alpha * mix_relative(x, y, beta)
    raise ValueError(f"unknown mixer kind {kind!r}")


def mix(cfg: MixerConfig, x, y):
    """Combine PID action ``x`` with residual action ``y``, clipped to [-1, 1]."""
    return np.clip(mix_raw(cfg.kind, x, y, cfg.alpha, cfg.beta), -1.0, 1.0)


@dataclass(frozen=True)
class ActuatorRateConfig:
    """Per-channel increment scale applied to the joint action."""

    c: tuple = (0.4, 0.4, 0.1, 0.05)

    def __post_init__(self):
        c = tuple(float(v) for v in np.atleast_1d(self.c))
        if any(not 0.0 < v <= 1.0 for v in c):
            raise ValueError(f"rate scales must lie in (0, 1], got {c}")
        object.__setattr__(self, "c", c)

    def as_array(self) -> np.ndarray:
        return np.array(self.c)


def update_actuators(s, a, c: ActuatorRateConfig | Sequence[float]) -> np.ndarray:
    """One increment step ``s + c * a`` with both action and state clipped."""
    scale = c.as_array() if isinstance(c, ActuatorRateConfig) else np.asarray(c, dtype=float)
    a = np.clip(np.asarray(a, dtype=float), -1.0, 1.0)
    return np.clip(np.asarray(s, dtype=float) + scale * a, -1.0, 1.0)
