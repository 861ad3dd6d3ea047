"""Experiment configuration: flat ``key=value`` files with typed fields.

Keys mirror the hyperparameter names used throughout the package (``lr``,
``gamma``, ``lambda``, ``epsilon``, ``bs``, ``l``, ``dim_z``, ``tf``...).
Unknown keys are rejected by name.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .abstraction import AbstractionConfig
from .envs import ConfigError, DoorKeyConfig, MultiItemConfig
from .ppo import PpoConfig

METHODS = ("ppo", "dchrl", "dchrl-sa")
ENVS = ("doorkey", "multiitem")
MODES = ("mdp", "pomdp")


@dataclass
class ExperimentConfig:
    env: str = "doorkey"
    method: str = "dchrl"
    mode: str = "pomdp"
    # environment
    grid_size: int = 16
    window: int = 5
    num_keys: int = 2
    max_steps: int = 512
    num_item_types: int = 21
    group_size: int = 4
    carry_divisor: float = 0.0  # 0 means "number of cells"
    penalty_unit: str = "items"
    # policy optimisation
    lr: float = 1e-4
    gamma: float = 0.997
    lambda_: float = 0.95
    epsilon: float = 0.2
    bs: int = 256
    l: int = 15  # noqa: E741
    epochs: int = 4
    rollout: int = 2048
    ent_coef: float = 0.01
    vf_coef: float = 0.5
    max_grad_norm: float = 0.5
    smdp_discount: bool = False
    hidden: str = "64,64"
    lstm_hidden: int = 64
    goal_features: bool = False
    # state abstraction
    dim_z: int = 60
    bs_abs: int = 384
    tf: int = 30
    lambda_bisim: float = 1.0
    abs_lr: float = 1e-4
    abs_hidden: str = "128"
    abs_head_hidden: str = "128"
    abs_capacity: int = 50_000
    augment_prob: float = 0.5
    # run control
    seeds: str = "0"
    budget: int = 200_000  # primitive environment steps
    n_envs: int = 8
    eval_every: int = 20_000
    eval_episodes: int = 10
    checkpoint_every: int = 0  # updates; 0 = only at the end
    log_trajectories: bool = False
    log_macros: bool = False
    output_dir: str = "runs"

    # -- derived -------------------------------------------------------------

    @property
    def hierarchical(self) -> bool:
        return self.method != "ppo"

    @property
    def abstraction(self) -> bool:
        return self.method == "dchrl-sa"

    @property
    def seed_list(self) -> list[int]:
        return [int(s) for s in str(self.seeds).replace(";", ",").split(",") if s.strip()]

    def hidden_sizes(self, key: str = "hidden") -> tuple[int, ...]:
        raw = str(getattr(self, key)).strip()
        return tuple(int(x) for x in raw.split(",") if x.strip())

    def validate(self) -> None:
        if self.env not in ENVS:
            raise ConfigError(f"env must be one of {ENVS}, got {self.env!r}")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.env == "doorkey" and self.mode != "pomdp":
            raise ConfigError("doorkey is partially observable only (mode=pomdp)")
        if self.rollout < self.n_envs or self.n_envs < 1:
            raise ConfigError("rollout must be at least n_envs and n_envs >= 1")
        if self.l < 1 or self.bs < 1 or self.bs_abs < 1 or self.tf < 0:
            raise ConfigError("l, bs and bs_abs must be positive; tf non-negative")
        if not self.seed_list:
            raise ConfigError("at least one seed is required")
        self.env_config().validate()

    def env_config(self):
        if self.env == "doorkey":
            return DoorKeyConfig(
                grid_size=self.grid_size, window=self.window, num_keys=self.num_keys, max_steps=self.max_steps
            )
        return MultiItemConfig(
            grid_size=self.grid_size,
            num_item_types=self.num_item_types,
            group_size=self.group_size,
            window=self.window,
            max_steps=self.max_steps,
            mode=self.mode,
            carry_divisor=self.carry_divisor or None,
            penalty_unit=self.penalty_unit,
        )

    def ppo_config(self) -> PpoConfig:
        return PpoConfig(
            lr=self.lr,
            gamma=self.gamma,
            gae_lambda=self.lambda_,
            clip=self.epsilon,
            epochs=self.epochs,
            minibatch=self.bs,
            rollout=self.rollout,
            vf_coef=self.vf_coef,
            ent_coef=self.ent_coef,
            max_grad_norm=self.max_grad_norm,
            smdp_discount=self.smdp_discount,
        )

    def abstraction_config(self) -> AbstractionConfig:
        return AbstractionConfig(
            dim_z=self.dim_z,
            hidden=self.hidden_sizes("abs_hidden"),
            lstm_hidden=self.lstm_hidden,
            head_hidden=self.hidden_sizes("abs_head_hidden"),
            lam=self.lambda_bisim,
            batch_size=self.bs_abs,
            tf=self.tf,
            lr=self.abs_lr,
            capacity=self.abs_capacity,
            augment_prob=self.augment_prob,
        )

    # -- serialisation ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {_public(f.name): getattr(self, f.name) for f in fields(self)}

    def dumps(self) -> str:
        return "".join(f"{k}={_format(v)}\n" for k, v in self.to_dict().items())

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


def _public(name: str) -> str:
    return name.rstrip("_")


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


_FIELDS = {_public(f.name): f for f in fields(ExperimentConfig)}
_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _coerce(key: str, raw: str):
    f = _FIELDS[key]
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    raw = raw.strip()
    try:
        if kind == "bool":
            return _BOOL[raw.lower()]
        if kind == "int":
            return int(float(raw)) if "e" in raw.lower() else int(raw)
        if kind == "float":
            return float(raw)
    except (KeyError, ValueError):
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {kind})") from None
    return raw


def parse_pairs(pairs, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Apply ``key=value`` strings on top of ``base`` (or the defaults)."""
    values = {}
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        values[_FIELDS[key].name] = _coerce(key, raw)
    cfg = dataclasses.replace(base or ExperimentConfig(), **values)
    return cfg


def load_config(path, overrides=()) -> ExperimentConfig:
    """Read a config file; a ``preset=<name>`` line starts from that preset."""
    lines = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            lines.append(line)
    base = None
    rest = []
    for line in lines:
        key, _, value = line.partition("=")
        if key.strip() == "preset":
            base = preset(value.strip())
        else:
            rest.append(line)
    cfg = parse_pairs([*rest, *overrides], base)
    cfg.validate()
    return cfg


# -- presets ------------------------------------------------------------------------


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name]()


def _doorkey16() -> ExperimentConfig:
    return ExperimentConfig(env="doorkey", mode="pomdp", grid_size=16, window=5, num_keys=2, max_steps=512, dim_z=60)


def _multiitem12(mode: str) -> ExperimentConfig:
    return ExperimentConfig(
        env="multiitem",
        mode=mode,
        grid_size=12,
        window=7,
        num_item_types=21,
        max_steps=1152,
        dim_z=25 if mode == "mdp" else 40,
    )


def _doorkey8() -> ExperimentConfig:
    return ExperimentConfig(
        env="doorkey",
        mode="pomdp",
        grid_size=8,
        window=5,
        num_keys=1,
        max_steps=128,
        dim_z=60,
        budget=200_000,
        eval_every=10_000,
    )


def _multiitem8() -> ExperimentConfig:
    return ExperimentConfig(
        env="multiitem",
        mode="mdp",
        grid_size=8,
        window=7,
        num_item_types=6,
        max_steps=512,
        dim_z=25,
        budget=300_000,
        eval_every=25_000,
    )


PRESETS = {
    "doorkey16": _doorkey16,
    "multiitem12-mdp": lambda: _multiitem12("mdp"),
    "multiitem12-pomdp": lambda: _multiitem12("pomdp"),
    "doorkey8": _doorkey8,
    "multiitem8": _multiitem8,
}
