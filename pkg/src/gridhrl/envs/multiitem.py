"""Multi-item collection world: gather items, submit groups at the warehouse."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gridhrl.envs.core import (
    Cell,
    ConfigError,
    GridEnv,
    GridState,
    InteractRules,
    ObsMode,
    item_code,
    substream,
)

_AGENT, _ITEMS = range(2)

GROUP_REWARD = 3.0
COMPLETION_BONUS = 100.0
BASE_STEP_PENALTY = 0.1


def default_items_per_type(num_item_types: int, group_size: int) -> list[int]:
    """140 items over 21 types (14 x 8 + 7 x 4); one group per type otherwise."""
    if num_item_types == 21 and group_size == 4:
        return [8] * 14 + [4] * 7
    return [group_size] * num_item_types


def step_penalty(carry_number: int, carry_divisor: float) -> float:
    return -(BASE_STEP_PENALTY + carry_number / carry_divisor)


@dataclass
class MultiItemConfig:
    grid_size: int = 12
    num_item_types: int = 21
    items_per_type: list[int] | None = None
    group_size: int = 4
    window: int = 7
    max_steps: int = 1152
    mode: str = "mdp"  # "mdp" (full map) or "pomdp" (egocentric window)
    randomize_items: bool = False
    layout_seed: int = 0
    carry_divisor: float | None = None  # defaults to the number of grid cells
    penalty_unit: str = "items"  # "items" or "groups" for the incompleteness penalty

    def __post_init__(self):
        if self.items_per_type is None:
            self.items_per_type = default_items_per_type(self.num_item_types, self.group_size)
        self.items_per_type = [int(x) for x in self.items_per_type]

    @property
    def total_items(self) -> int:
        return sum(self.items_per_type)

    @property
    def divisor(self) -> float:
        return float(self.carry_divisor or self.grid_size * self.grid_size)

    def validate(self) -> None:
        if self.mode not in ("mdp", "pomdp"):
            raise ConfigError(f"mode must be 'mdp' or 'pomdp', got {self.mode!r}")
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError(f"window must be a positive odd integer, got {self.window}")
        if len(self.items_per_type) != self.num_item_types:
            raise ConfigError("items_per_type must have one entry per item type")
        if self.group_size < 1 or any(n % self.group_size for n in self.items_per_type):
            raise ConfigError("every items_per_type entry must be a multiple of group_size")
        if self.total_items > self.grid_size * self.grid_size - 1:
            raise ConfigError("too many items to place on distinct non-warehouse cells")
        if self.penalty_unit not in ("items", "groups"):
            raise ConfigError(f"penalty_unit must be 'items' or 'groups', got {self.penalty_unit!r}")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be positive")


@dataclass
class Backpack:
    counts: np.ndarray

    @property
    def carry_number(self) -> int:
        return int(self.counts.sum())

    def features(self):
        return self.counts.astype(np.float64)

    def copy(self):
        return Backpack(self.counts.copy())


@dataclass
class SubmissionLedger:
    submitted: np.ndarray  # items submitted per type

    @property
    def submit_number(self) -> int:
        return int(self.submitted.sum())

    def copy(self):
        return SubmissionLedger(self.submitted.copy())


class MultiItemEnv(GridEnv):
    """Warehouse at (0, 0); items lie on the floor and the agent walks onto them.

    Interact on an item cell picks the item up; Interact on the warehouse
    submits every complete group of ``group_size`` identical items. Every
    primitive step (including Interact and wait) costs
    ``0.1 + carry_number / carry_divisor``. Only the agent start is random
    per episode unless ``randomize_items`` is set.
    """

    def __init__(self, config: MultiItemConfig | None = None):
        config = config or MultiItemConfig()
        config.validate()
        super().__init__(config)
        items = frozenset(item_code(t) for t in range(config.num_item_types))
        self.rules = InteractRules(
            passable=frozenset({int(Cell.EMPTY), int(Cell.WAREHOUSE)}) | items,
            interactable=frozenset({int(Cell.WAREHOUSE)}) | items,
            interact_from="on",
        )

    @property
    def obs_mode(self) -> ObsMode:
        return ObsMode.FULL_MAP if self.config.mode == "mdp" else ObsMode.EGOCENTRIC

    @property
    def ledger(self) -> SubmissionLedger:
        return self.state.extras["ledger"]

    def _generate(self, seed: int) -> GridState:
        cfg = self.config
        n = cfg.grid_size
        cells = np.zeros((n, n), dtype=np.int16)
        cells[0, 0] = Cell.WAREHOUSE
        free = [(r, c) for r in range(n) for c in range(n) if (r, c) != (0, 0)]
        item_seed = seed if cfg.randomize_items else cfg.layout_seed
        order = substream(item_seed, _ITEMS).permutation(len(free))
        k = 0
        for t, count in enumerate(cfg.items_per_type):
            for _ in range(count):
                cells[free[int(order[k])]] = item_code(t)
                k += 1
        agent = free[int(substream(seed, _AGENT).integers(len(free)))]
        return GridState(
            width=n,
            height=n,
            cells=cells,
            agent_pos=agent,
            inventory=Backpack(np.zeros(cfg.num_item_types, dtype=np.int64)),
            step_count=0,
            max_steps=cfg.max_steps,
            extras={"ledger": SubmissionLedger(np.zeros(cfg.num_item_types, dtype=np.int64))},
        )

    def _step_cost(self) -> float:
        return step_penalty(self.state.inventory.carry_number, self.config.divisor)

    def _interact(self, events: list[str]) -> float:
        s = self.state
        cfg = self.config
        code = int(s.cells[s.agent_pos])
        bag: Backpack = s.inventory
        if code == Cell.WAREHOUSE:
            groups = bag.counts // cfg.group_size
            if not groups.any():
                return 0.0
            moved = groups * cfg.group_size
            bag.counts -= moved
            self.ledger.submitted += moved
            events.append("submit")
            reward = GROUP_REWARD * float(groups.sum())
            if self.ledger.submit_number == cfg.total_items:
                s.done = True
                events.append("complete")
                reward += COMPLETION_BONUS
            return reward
        if code >= Cell.ITEM0:
            bag.counts[code - Cell.ITEM0] += 1
            s.cells[s.agent_pos] = Cell.EMPTY
            events.append("pickup")
        return 0.0

    def _timeout_reward(self, events: list[str]) -> float:
        events.append("incomplete")
        cfg = self.config
        if cfg.penalty_unit == "groups":
            return -float(cfg.total_items // cfg.group_size - self.ledger.submit_number // cfg.group_size)
        return -float(cfg.total_items - self.ledger.submit_number)

    def items_conserved(self) -> bool:
        """Grid + backpack + submitted equals the configured count per type."""
        s = self.state
        on_grid = np.array(
            [(s.cells == item_code(t)).sum() for t in range(self.config.num_item_types)]
        )
        total = on_grid + s.inventory.counts + self.ledger.submitted
        return bool(np.array_equal(total, np.asarray(self.config.items_per_type)))

    def summary(self) -> dict:
        return {
            "score": self.episode_return,
            "total_steps": self.state.step_count,
            "submit_number": self.ledger.submit_number,
        }
