"""Reduced-order blimp flight dynamics.

The vehicle is modelled in a north-east-down (NED) world frame with a
forward-right-down body frame.  Roll and lateral velocity are held at zero,
which leaves surge ``u``, heave ``w``, pitch rate and yaw rate as the body
states.  Wind is a world-frame velocity added during position integration,
so the body velocities are air-relative.

Actuator conventions (all commands normalised to [-1, 1]):

* ``m1``/``m2`` main thrusters, positive pushes forward.
* ``n0`` thrust-vectoring servo, positive tilts thrust toward body +z (down).
* ``f0``/``f1`` horizontal fins, positive pitches the nose down.
* ``f2``/``f3`` vertical fins, positive yaws to starboard (positive psi).
* ``m0`` tail motor on the lower vertical fin, same sign as ``f2``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi

# physical 8-vector layout
ACTUATOR_NAMES = ("m0", "m1", "m2", "n0", "f0", "f1", "f2", "f3")
# reduced 4-vector layout, ordered like the control channels
# (thrust, servo, yaw, altitude)
REDUCED_NAMES = ("m1", "n0", "f2", "f0")

CSV_COLUMNS = (
    "t", "x", "y", "z", "phi", "theta", "psi", "u", "v", "w", "omega_psi",
) + ACTUATOR_NAMES


def wrap_angle(a: float) -> float:
    """Wrap an angle in radians to (-pi, pi]."""
    return math.pi - (math.pi - a) % TWO_PI


def expand_actuators(reduced: Sequence[float]) -> np.ndarray:
    """Map the reduced (m1, n0, f2, f0) vector onto the physical 8-vector.

    Symmetric pairs share one command and the tail motor is slaved to the
    lower vertical fin: m1 = m2, f0 = f1, f2 = f3, m0 = f2.
    """
    m1, n0, f2, f0 = np.clip(np.asarray(reduced, dtype=float), -1.0, 1.0)
    return np.array([f2, m1, m1, n0, f0, f0, f2, f2])


@dataclass(frozen=True)
class ActuatorState:
    """Commanded actuator positions in reduced form."""

    reduced: tuple = (0.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        r = tuple(float(min(1.0, max(-1.0, x))) for x in self.reduced)
        if len(r) != 4:
            raise ValueError(f"reduced actuator state needs 4 entries, got {len(r)}")
        object.__setattr__(self, "reduced", r)

    @property
    def expanded(self) -> np.ndarray:
        return expand_actuators(self.reduced)

    def as_array(self) -> np.ndarray:
        return np.array(self.reduced)


@dataclass(frozen=True)
class EnvParams:
    """Per-episode environment variables subject to domain randomisation."""

    wind_xy: tuple = (0.0, 0.0)
    wind_z: float = 0.0
    buoyancy: float = 1.0
    freeflop_angle: float = 0.0
    collapse: float = 0.0
    deflation_rate: float = 0.0

    @property
    def wind(self) -> tuple:
        return (float(self.wind_xy[0]), float(self.wind_xy[1]), float(self.wind_z))


@dataclass(frozen=True)
class SimConfig:
    """Physical coefficients of the reduced blimp model.

    Only ``dt`` and ``arena_size`` carry values taken from the training setup
    (30 Hz, 200 m); everything else is a plausible default for a large
    outdoor blimp and may be overridden from a config file.
    """

    dt: float = 1.0 / 30.0
    arena_size: float = 200.0
    mass: float = 20.0  # surge/heave inertia incl. added mass [kg]
    nominal_buoyant_force: float = 20.0  # [N], net force is F*(1 - buoyancy)
    thrust_max: float = 6.0  # combined main thruster force [N]
    servo_max_angle: float = math.pi / 2
    tail_moment: float = 15.0  # tail motor yaw moment at full command [N m]
    fin_yaw_coeff: float = 0.35  # yaw moment per (m/s)^2 at full deflection
    fin_pitch_coeff: float = 0.35  # pitch moment per (m/s)^2 at full deflection
    drag_u_lin: float = 0.1
    drag_u_quad: float = 0.24
    drag_w_lin: float = 1.0
    drag_w_quad: float = 8.0
    yaw_inertia: float = 1.0
    yaw_damping_lin: float = 10.0
    yaw_damping_quad: float = 4.0
    pitch_inertia: float = 10.0
    pitch_restoring: float = 6.0  # pendulum moment per sin(theta) [N m]
    pitch_damping: float = 8.0
    actuator_lag: tuple = (0.3,) * 8  # first-order time constants [s]
    freeflop_gain: float = 0.3
    collapse_gain: float = 0.3
    deflation_gain: float = 0.3
    max_lateral_speed: float = 0.2
    max_roll: float = 0.1

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not self.arena_size > 0:
            raise ValueError(f"arena_size must be positive, got {self.arena_size}")
        lag = tuple(float(x) for x in np.broadcast_to(self.actuator_lag, (8,)))
        object.__setattr__(self, "actuator_lag", lag)
        for f in fields(self):
            if f.name in ("dt", "arena_size", "actuator_lag", "freeflop_gain",
                          "collapse_gain", "deflation_gain"):
                continue
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{f.name} must be a positive finite number, got {v}")
        if any(not x > 0 for x in lag):
            raise ValueError("actuator lag constants must be positive")

    @classmethod
    def from_mapping(cls, values: Mapping) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise KeyError(f"unknown sim keys: {sorted(unknown)}")
        kw = dict(values)
        if "actuator_lag" in kw:
            kw["actuator_lag"] = tuple(np.broadcast_to(kw["actuator_lag"], (8,)))
        return cls(**kw)


@dataclass(frozen=True)
class BlimpState:
    """Pose and air-relative body velocity of the blimp.

    ``effectors`` holds the physical (lagged) actuator positions in the
    8-vector layout; ``ground_velocity`` is the world-frame velocity from the
    last integration step, including wind.
    """

    position: tuple = (0.0, 0.0, 0.0)
    attitude: tuple = (0.0, 0.0, 0.0)  # roll, pitch, yaw
    velocity: tuple = (0.0, 0.0, 0.0)  # body u, v, w
    yaw_rate: float = 0.0
    pitch_rate: float = 0.0
    effectors: tuple = (0.0,) * 8
    ground_velocity: tuple = (0.0, 0.0, 0.0)
    t: float = 0.0

    @property
    def speed(self) -> float:
        """Ground speed magnitude."""
        return math.sqrt(sum(x * x for x in self.ground_velocity))

    @property
    def airspeed(self) -> float:
        return self.velocity[0]

    @property
    def vertical_rate(self) -> float:
        """World-frame vertical velocity, NED (positive = descending)."""
        return self.ground_velocity[2]

    def as_row(self) -> list:
        return [self.t, *self.position, *self.attitude, *self.velocity,
                self.yaw_rate, *self.effectors]

    def is_finite(self) -> bool:
        vals = (*self.position, *self.attitude, *self.velocity, self.yaw_rate,
                self.pitch_rate, *self.effectors, *self.ground_velocity, self.t)
        return all(math.isfinite(v) for v in vals)


def fin_effectiveness(env: EnvParams, cfg: SimConfig) -> float:
    """Multiplier on fin moments from hull and fin degradation, in [0.1, 1]."""
    k = ((1.0 - cfg.freeflop_gain * env.freeflop_angle)
         * (1.0 - cfg.collapse_gain * env.collapse / 0.02)
         * (1.0 - cfg.deflation_gain * env.deflation_rate / 1.5))
    return min(1.0, max(0.1, k))


def step_dynamics(state: BlimpState, actuators: ActuatorState | Sequence[float],
                  env: EnvParams, cfg: SimConfig) -> BlimpState:
    """Advance the blimp by one ``cfg.dt`` with semi-implicit Euler.

    ``actuators`` is the commanded state (reduced or an ActuatorState); the
    physical effectors chase it through first-order lags before forces are
    evaluated.
    """
    if not state.is_finite():
        raise ValueError(f"non-finite blimp state: {state}")
    if isinstance(actuators, ActuatorState):
        cmd = actuators.expanded
    else:
        if not np.all(np.isfinite(actuators)):
            raise ValueError(f"non-finite actuator command {actuators}")
        cmd = expand_actuators(actuators)

    dt = cfg.dt
    eff = tuple(
        e + (1.0 - math.exp(-dt / tau)) * (c - e)
        for e, c, tau in zip(state.effectors, cmd.tolist(), cfg.actuator_lag)
    )
    m0, m1, m2, n0, f0, f1, f2, f3 = eff

    u, _, w = state.velocity
    _, theta, psi = state.attitude
    q, r = state.pitch_rate, state.yaw_rate
    st, ct = math.sin(theta), math.cos(theta)

    thrust = 0.5 * cfg.thrust_max * (m1 + m2)
    mu = n0 * cfg.servo_max_angle
    net_down = cfg.nominal_buoyant_force * (1.0 - env.buoyancy)
    fin_k = fin_effectiveness(env, cfg)
    dyn = u * abs(u)

    fx = thrust * math.cos(mu) - net_down * st - cfg.drag_u_lin * u - cfg.drag_u_quad * dyn
    fz = (thrust * math.sin(mu) + net_down * ct
          - cfg.drag_w_lin * w - cfg.drag_w_quad * w * abs(w))
    m_pitch = (-cfg.fin_pitch_coeff * fin_k * dyn * 0.5 * (f0 + f1)
               - cfg.pitch_restoring * st - cfg.pitch_damping * q)
    m_yaw = (cfg.tail_moment * m0 + cfg.fin_yaw_coeff * fin_k * dyn * 0.5 * (f2 + f3)
             - cfg.yaw_damping_lin * r - cfg.yaw_damping_quad * r * abs(r))

    u = u + dt * fx / cfg.mass
    w = w + dt * fz / cfg.mass
    q = q + dt * m_pitch / cfg.pitch_inertia
    r = r + dt * m_yaw / cfg.yaw_inertia

    theta = min(math.pi / 2, max(-math.pi / 2, theta + dt * q))
    psi = wrap_angle(psi + dt * r)

    st, ct = math.sin(theta), math.cos(theta)
    horiz = u * ct + w * st
    wx, wy, wz = env.wind
    vel = (horiz * math.cos(psi) + wx, horiz * math.sin(psi) + wy, -u * st + w * ct + wz)
    x, y, z = state.position
    pos = (x + dt * vel[0], y + dt * vel[1], z + dt * vel[2])

    return BlimpState(
        position=pos,
        attitude=(0.0, theta, psi),
        velocity=(u, 0.0, w),
        yaw_rate=r,
        pitch_rate=q,
        effectors=eff,
        ground_velocity=vel,
        t=state.t + dt,
    )


def terminal_surge_speed(cfg: SimConfig, thrust_command: float = 1.0) -> float:
    """Closed-form forward speed where thrust balances linear+quadratic drag."""
    thrust = cfg.thrust_max * thrust_command
    a, b = cfg.drag_u_quad, cfg.drag_u_lin
    return (-b + math.sqrt(b * b + 4 * a * thrust)) / (2 * a)


def body_frame_target(state: BlimpState, wp: Sequence[float]) -> tuple:
    """Cylindrical body-frame coordinates (l_r, psi_r, z_r) of a waypoint.

    ``z_r`` is ``target_z - blimp_z`` in NED, so it is positive when the
    waypoint lies below the blimp.
    """
    if not all(math.isfinite(v) for v in wp):
        raise ValueError(f"non-finite waypoint {wp}")
    dx = wp[0] - state.position[0]
    dy = wp[1] - state.position[1]
    l_r = math.hypot(dx, dy)
    psi_r = wrap_angle(math.atan2(dy, dx) - state.attitude[2])
    return l_r, psi_r, wp[2] - state.position[2]


def relative_yaw_next(state: BlimpState, next_wp: Sequence[float] | None) -> float:
    """Relative bearing to the waypoint after the active one; 0 if none."""
    if next_wp is None:
        return 0.0
    return body_frame_target(state, next_wp)[1]


def write_trajectory_csv(path: str | Path, states: Iterable[BlimpState]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for s in states:
            writer.writerow([repr(float(v)) for v in s.as_row()])

