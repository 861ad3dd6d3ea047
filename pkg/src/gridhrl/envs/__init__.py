from gridhrl.envs.core import (
    Action,
    Cell,
    ConfigError,
    GridEnv,
    GridState,
    InteractRules,
    LifecycleError,
    Observation,
    ObsMode,
    StepOutcome,
    observe,
)
from gridhrl.envs.doorkey import DoorKeyConfig, DoorKeyEnv
from gridhrl.envs.multiitem import MultiItemConfig, MultiItemEnv


def make_env(config):
    """Build the environment matching a config object."""
    if isinstance(config, DoorKeyConfig):
        return DoorKeyEnv(config)
    if isinstance(config, MultiItemConfig):
        return MultiItemEnv(config)
    raise ConfigError(f"unknown environment config type {type(config).__name__}")


__all__ = [
    "Action",
    "Cell",
    "ConfigError",
    "DoorKeyConfig",
    "DoorKeyEnv",
    "GridEnv",
    "GridState",
    "InteractRules",
    "LifecycleError",
    "MultiItemConfig",
    "MultiItemEnv",
    "ObsMode",
    "Observation",
    "StepOutcome",
    "make_env",
    "observe",
]
