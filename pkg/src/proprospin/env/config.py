"""Configuration dataclasses for the planar hand environment.

All physical quantities are SI (meters, kilograms, seconds, radians).
Validation happens in ``__post_init__`` so a bad config fails at
construction, not at some point mid-simulation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace


class ConfigError(ValueError):
    """Raised when a configuration value or structure is invalid."""


def _check_range(name: str, rng: tuple[float, float], positive: bool = False) -> None:
    if len(rng) != 2 or rng[0] > rng[1]:
        raise ConfigError(f"{name} must be (lo, hi) with lo <= hi, got {rng}")
    if positive and rng[0] <= 0.0:
        raise ConfigError(f"{name} must be strictly positive, got {rng}")


@dataclass
class HandConfig:
    """Planar hand: fingers on a circle, each a chain of pin joints.

    Per-joint values (limits, neutral pose) are given per joint within a
    finger and tiled across fingers.
    """

    n_fingers: int = 4
    joints_per_finger: int = 2
    base_radius: float = 0.10
    link_lengths: tuple[float, ...] = (0.045, 0.035)
    joint_limits_lo: tuple[float, ...] = (-0.9, -0.2)
    joint_limits_hi: tuple[float, ...] = (0.9, 1.6)
    neutral_pose: tuple[float, ...] = (0.0, 0.6)
    inertia: float = 1e-4
    joint_damping: float = 0.002
    stiffness: float = 0.5
    spring_damping: float = 0.01
    motor_time_constant: float = 0.05
    backlash: float = 0.02
    friction_coef: float = 0.8

    @property
    def dof(self) -> int:
        return self.n_fingers * self.joints_per_finger

    def __post_init__(self) -> None:
        k = self.joints_per_finger
        if self.n_fingers < 1 or k < 1:
            raise ConfigError("need at least one finger and one joint per finger")
        for name in ("link_lengths", "joint_limits_lo", "joint_limits_hi", "neutral_pose"):
            vals = getattr(self, name)
            if len(vals) != k:
                raise ConfigError(f"{name} needs {k} entries, got {len(vals)}")
        for lo, hi, mid in zip(self.joint_limits_lo, self.joint_limits_hi, self.neutral_pose):
            if lo >= hi:
                raise ConfigError(f"joint limit range empty: [{lo}, {hi}]")
            if not (lo <= mid <= hi):
                raise ConfigError(f"neutral pose {mid} outside [{lo}, {hi}]")
        if min(self.link_lengths) <= 0 or self.base_radius <= 0:
            raise ConfigError("link lengths and base radius must be positive")
        for name in ("inertia", "stiffness", "motor_time_constant"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.backlash < 0 or self.joint_damping < 0 or self.spring_damping < 0:
            raise ConfigError("damping and backlash must be nonnegative")


@dataclass
class ObjectConfig:
    """Rotatable disk held at the palm center."""

    radius: float = 0.0275
    mass: float = 0.100
    friction: float = 0.6
    inertia: float | None = None  # None -> solid disk, m*r^2/2

    def __post_init__(self) -> None:
        if self.radius <= 0 or self.mass <= 0 or self.friction < 0:
            raise ConfigError("object radius/mass must be positive, friction nonnegative")
        if self.inertia is not None and self.inertia <= 0:
            raise ConfigError("object inertia must be positive when given")

    @property
    def inertia_value(self) -> float:
        return self.inertia if self.inertia is not None else 0.5 * self.mass * self.radius**2


# sizes follow cube edge lengths in mm; disks sized to the inscribed contact
# circle, masses at a common density so bigger objects are also heavier
OBJECT_PRESETS: dict[str, ObjectConfig | None] = {
    "none": None,
    "45mm": ObjectConfig(radius=0.0225, mass=0.055),
    "55mm": ObjectConfig(radius=0.0275, mass=0.100),
    "65mm": ObjectConfig(radius=0.0325, mass=0.165),
}


def object_preset(name: str) -> ObjectConfig | None:
    if name not in OBJECT_PRESETS:
        raise ConfigError(f"unknown object preset {name!r}; choices: {sorted(OBJECT_PRESETS)}")
    preset = OBJECT_PRESETS[name]
    return replace(preset) if preset is not None else None


@dataclass
class SensorConfig:
    """Joint sensing model: per-episode bias plus per-step noise.

    ``joint_sensor`` reads the joint angle directly; ``motor_encoder`` reads
    the motor-side angle, so transmission effects (backlash, spring wind-up)
    are invisible to it.  Encoder velocity is the finite difference of the
    noisy reading; joint-sensor velocity is the true rate plus noise.
    """

    mode: str = "joint_sensor"
    bias_std: float = 0.02
    noise_std: float = 0.01
    velocity_noise_std: float = 0.1

    def __post_init__(self) -> None:
        if self.mode not in ("joint_sensor", "motor_encoder"):
            raise ConfigError(f"unknown sensor mode {self.mode!r}")
        if min(self.bias_std, self.noise_std, self.velocity_noise_std) < 0:
            raise ConfigError("noise levels must be nonnegative")


@dataclass
class RandomizationRanges:
    """Per-episode domain randomization; zero-width ranges mean deterministic.

    ``*_scale`` entries multiply the nominal value; ``object_friction`` is
    absolute (``None`` keeps the object's configured value).  Stiffness and
    damping scales are drawn log-uniformly.
    """

    hand_friction_scale: tuple[float, float] = (0.8, 2.0)
    link_mass_scale: tuple[float, float] = (0.95, 1.05)
    stiffness_scale: tuple[float, float] = (0.8, 1.25)
    damping_scale: tuple[float, float] = (0.8, 1.25)
    object_friction: tuple[float, float] | None = (0.3, 1.0)
    object_mass_scale: tuple[float, float] = (0.5, 1.5)
    initial_yaw: tuple[float, float] = (-math.pi, math.pi)

    def __post_init__(self) -> None:
        _check_range("hand_friction_scale", self.hand_friction_scale, positive=True)
        _check_range("link_mass_scale", self.link_mass_scale, positive=True)
        _check_range("stiffness_scale", self.stiffness_scale, positive=True)
        _check_range("damping_scale", self.damping_scale, positive=True)
        if self.object_friction is not None:
            _check_range("object_friction", self.object_friction)
            if self.object_friction[0] < 0:
                raise ConfigError("object_friction must be nonnegative")
        _check_range("object_mass_scale", self.object_mass_scale, positive=True)
        _check_range("initial_yaw", self.initial_yaw)

    @classmethod
    def disabled(cls) -> "RandomizationRanges":
        """Collapse every range so resets use the nominal parameters."""
        return cls(
            hand_friction_scale=(1.0, 1.0),
            link_mass_scale=(1.0, 1.0),
            stiffness_scale=(1.0, 1.0),
            damping_scale=(1.0, 1.0),
            object_friction=None,
            object_mass_scale=(1.0, 1.0),
            initial_yaw=(0.0, 0.0),
        )


@dataclass
class CommandConfig:
    """Episode command: hold position at the palm center, rotate about z."""

    omega_min: float = 0.25
    omega_max: float = 1.5
    direction: str = "both"  # both | positive | negative

    def __post_init__(self) -> None:
        if not (0.0 <= self.omega_min <= self.omega_max):
            raise ConfigError("need 0 <= omega_min <= omega_max")
        if self.omega_max > 1.5:
            raise ConfigError("commanded |omega| is capped at 1.5 rad/s")
        if self.direction not in ("both", "positive", "negative"):
            raise ConfigError(f"unknown command direction {self.direction!r}")


@dataclass
class RewardConfig:
    w_pos: float = 10.0
    sigma_pos: float = 0.02
    w_mag: float = 30.0
    sigma_mag: float = 0.5
    w_dir: float = 60.0
    w_smooth: float = 1.0
    sigma_smooth: float = 1.0
    smooth_penalty_mode: bool = False
    w_vel: float = 1e-5
    w_act: float = 2e-4
    w_rate: float = 0.075

    def __post_init__(self) -> None:
        if min(self.sigma_pos, self.sigma_mag, self.sigma_smooth) <= 0:
            raise ConfigError("reward length scales must be positive")


@dataclass
class SimConfig:
    """Integration and contact solver granularity."""

    dt: float = 1.0 / 120.0
    substeps: int = 6
    contact_stiffness: float = 300.0
    contact_damping: float = 8.0
    slip_smoothing: float = 0.01
    lin_damping: float = 0.5
    rot_damping: float = 0.002
    gravity: float = 9.81
    load_lever: float = 0.04
    ema_alpha: float = 0.5

    @property
    def dt_policy(self) -> float:
        return self.dt * self.substeps

    def __post_init__(self) -> None:
        if self.dt <= 0 or self.substeps < 1:
            raise ConfigError("dt must be positive and substeps >= 1")
        if not (0.0 < self.ema_alpha <= 1.0):
            raise ConfigError("ema_alpha must be in (0, 1]")
        if min(self.contact_stiffness, self.slip_smoothing) <= 0:
            raise ConfigError("contact stiffness and slip smoothing must be positive")


@dataclass
class EnvConfig:
    hand: HandConfig = field(default_factory=HandConfig)
    obj: ObjectConfig | None = field(default_factory=ObjectConfig)
    sensor: SensorConfig = field(default_factory=SensorConfig)
    randomization: RandomizationRanges = field(default_factory=RandomizationRanges)
    command: CommandConfig = field(default_factory=CommandConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    episode_timeout: float = 32.0
    drop_distance: float = 0.06
    drop_contact_time: float = 0.25
    drop_grace: float = 1.0
    min_contacts: int = 2
    terminate_on_drop: bool = True

    def __post_init__(self) -> None:
        if self.episode_timeout <= 0:
            raise ConfigError("episode_timeout must be positive")
        if self.drop_distance <= 0 or self.drop_contact_time < 0 or self.drop_grace < 0:
            raise ConfigError("drop thresholds must be nonnegative (distance positive)")


HAND_PRESETS = {
    # desk-scale default: 4 fingers x 2 joints
    "desk8": HandConfig(),
    # full-hand joint count, one pin joint per finger on a wider circle
    "full17": HandConfig(
        n_fingers=17,
        joints_per_finger=1,
        base_radius=0.10,
        link_lengths=(0.07,),
        joint_limits_lo=(-0.9,),
        joint_limits_hi=(0.9,),
        neutral_pose=(0.0,),
    ),
}


def hand_preset(name: str) -> HandConfig:
    if name not in HAND_PRESETS:
        raise ConfigError(f"unknown hand preset {name!r}; choices: {sorted(HAND_PRESETS)}")
    return replace(HAND_PRESETS[name])
