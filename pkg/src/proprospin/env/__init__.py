"""Planar tendon-hand simulation: config, physics kernels, batched env."""

from .config import (
    CommandConfig,
    ConfigError,
    EnvConfig,
    HandConfig,
    ObjectConfig,
    RandomizationRanges,
    RewardConfig,
    SensorConfig,
    SimConfig,
    hand_preset,
    object_preset,
)
from .hand_env import (
    DEFAULT_BACKEND,
    Event,
    HandEnv,
    SimulationDiverged,
    StepResult,
    get_backend,
)
from .rewards import reward_terms

__all__ = [
    "CommandConfig",
    "ConfigError",
    "DEFAULT_BACKEND",
    "EnvConfig",
    "Event",
    "HandConfig",
    "HandEnv",
    "ObjectConfig",
    "RandomizationRanges",
    "RewardConfig",
    "SensorConfig",
    "SimConfig",
    "SimulationDiverged",
    "StepResult",
    "get_backend",
    "hand_preset",
    "object_preset",
    "reward_terms",
]
