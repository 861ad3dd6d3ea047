"""Two-room DoorKey world with absolute moves and a treasure chest."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from gridhrl.envs.core import (
    Cell,
    ConfigError,
    GridEnv,
    GridState,
    InteractRules,
    ObsMode,
    substream,
)

# substream ids, one per placement decision
_WALL, _DOOR, _AGENT, _KEYS, _TREASURE, _CORRECT = range(6)

_NEIGHBOURS = ((-1, 0), (1, 0), (0, -1), (0, 1))

DOOR_REWARD = 1.0
COLLISION_PENALTY = -0.01


def treasure_reward(total_steps: int, max_steps: int) -> float:
    return 5.0 - 3.0 * (total_steps / max_steps)


@dataclass
class DoorKeyConfig:
    grid_size: int = 16
    window: int = 5
    num_keys: int = 2
    max_steps: int = 512
    randomize_agent: bool = True
    randomize_door: bool = True
    randomize_keys: bool = True
    randomize_wall: bool = True
    randomize_treasure: bool = True
    max_layout_attempts: int = 1000

    def validate(self) -> None:
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError(f"window must be a positive odd integer, got {self.window}")
        if self.grid_size < 5:
            raise ConfigError(f"grid_size must be >= 5 to fit two rooms, got {self.grid_size}")
        if self.num_keys not in (1, 2):
            raise ConfigError(f"num_keys must be 1 or 2, got {self.num_keys}")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be positive")


@dataclass
class DoorKeyInventory:
    held: int = 0  # 0 none, 1 key 1, 2 key 2

    def features(self):
        return [float(self.held)]

    def copy(self):
        return DoorKeyInventory(self.held)


def _reachable(cells: np.ndarray, start: tuple[int, int], passable) -> np.ndarray:
    h, w = cells.shape
    seen = np.zeros_like(cells, dtype=bool)
    seen[start] = True
    queue = deque([start])
    while queue:
        r, c = queue.popleft()
        for dr, dc in _NEIGHBOURS:
            nr, nc = r + dr, c + dc
            if 0 <= nr < h and 0 <= nc < w and not seen[nr, nc] and cells[nr, nc] in passable:
                seen[nr, nc] = True
                queue.append((nr, nc))
    return seen


def _adjacent_cells(pos, shape):
    h, w = shape
    for dr, dc in _NEIGHBOURS:
        r, c = pos[0] + dr, pos[1] + dc
        if 0 <= r < h and 0 <= c < w:
            yield r, c


class DoorKeyEnv(GridEnv):
    """A vertical wall splits the grid into room A (left) and room B (right).

    The agent and keys start in room A, the treasure sits in room B. Only
    one key opens the door; keys carry distinct codes but which one is
    correct is hidden. Interact acts on the 4-neighbourhood with priority
    door > key > treasure, the first applicable one wins. Holding a key
    blocks further pickups.
    """

    collision_penalty = COLLISION_PENALTY

    def __init__(self, config: DoorKeyConfig | None = None):
        config = config or DoorKeyConfig()
        config.validate()
        super().__init__(config)
        self.rules = InteractRules(
            passable=frozenset({int(Cell.EMPTY), int(Cell.DOOR_OPEN)}),
            interactable=frozenset(
                {int(Cell.DOOR_CLOSED), int(Cell.KEY1), int(Cell.KEY2), int(Cell.TREASURE)}
            ),
            interact_from="adjacent",
        )

    @property
    def obs_mode(self) -> ObsMode:
        return ObsMode.EGOCENTRIC

    # -- generation ------------------------------------------------------
    def _draw(self, seed: int, stream: int, attempt: int, randomize: bool):
        # fixed placements use seed 0 so they do not vary across episodes
        return substream(seed if randomize else 0, stream, attempt)

    def _generate(self, seed: int) -> GridState:
        cfg = self.config
        for attempt in range(cfg.max_layout_attempts):
            state = self._layout(seed, attempt)
            if self._solvable(state):
                return state
        raise ConfigError(f"no solvable DoorKey layout after {cfg.max_layout_attempts} attempts")

    def _layout(self, seed: int, attempt: int) -> GridState:
        cfg = self.config
        n = cfg.grid_size
        cells = np.zeros((n, n), dtype=np.int16)
        wall_col = int(self._draw(seed, _WALL, attempt, cfg.randomize_wall).integers(2, n - 2))
        door_row = int(self._draw(seed, _DOOR, attempt, cfg.randomize_door).integers(0, n))
        cells[:, wall_col] = Cell.WALL
        cells[door_row, wall_col] = Cell.DOOR_CLOSED

        room_a = [(r, c) for r in range(n) for c in range(wall_col)]
        room_b = [(r, c) for r in range(n) for c in range(wall_col + 1, n)]
        agent_rng = self._draw(seed, _AGENT, attempt, cfg.randomize_agent)
        agent = room_a[int(agent_rng.integers(len(room_a)))]
        free_a = [p for p in room_a if p != agent]
        key_rng = self._draw(seed, _KEYS, attempt, cfg.randomize_keys)
        key_idx = key_rng.choice(len(free_a), size=cfg.num_keys, replace=False)
        for k, idx in enumerate(key_idx):
            cells[free_a[int(idx)]] = Cell.KEY1 + k
        t_rng = self._draw(seed, _TREASURE, attempt, cfg.randomize_treasure)
        treasure = room_b[int(t_rng.integers(len(room_b)))]
        cells[treasure] = Cell.TREASURE
        correct = 1 + int(substream(seed, _CORRECT, attempt).integers(cfg.num_keys))
        return GridState(
            width=n,
            height=n,
            cells=cells,
            agent_pos=agent,
            inventory=DoorKeyInventory(),
            step_count=0,
            max_steps=cfg.max_steps,
            extras={
                "correct_key": correct,
                "door": (door_row, wall_col),
                "treasure": treasure,
                "wall_col": wall_col,
            },
        )

    def _solvable(self, state: GridState) -> bool:
        passable = self.rules.passable
        cells = state.cells.copy()
        correct_code = Cell.KEY1 + state.extras["correct_key"] - 1
        key_pos = tuple(np.argwhere(cells == correct_code)[0])
        other = [tuple(p) for p in np.argwhere((cells == Cell.KEY1) | (cells == Cell.KEY2))]
        other = [p for p in other if p != key_pos]

        reach = _reachable(cells, state.agent_pos, passable)
        stands = [
            p
            for p in _adjacent_cells(key_pos, cells.shape)
            if reach[p] and not any(abs(p[0] - o[0]) + abs(p[1] - o[1]) == 1 for o in other)
        ]
        if not stands:
            return False
        cells[key_pos] = Cell.EMPTY
        reach = _reachable(cells, state.agent_pos, passable)
        door = state.extras["door"]
        if not any(reach[p] for p in _adjacent_cells(door, cells.shape)):
            return False
        cells[door] = Cell.DOOR_OPEN
        reach = _reachable(cells, state.agent_pos, passable)
        return any(reach[p] for p in _adjacent_cells(state.extras["treasure"], cells.shape))

    # -- dynamics --------------------------------------------------------
    def _interact(self, events: list[str]) -> float:
        s = self.state
        inv: DoorKeyInventory = s.inventory
        around = list(_adjacent_cells(s.agent_pos, s.cells.shape))
        for p in around:
            if s.cells[p] == Cell.DOOR_CLOSED and inv.held == s.extras["correct_key"]:
                s.cells[p] = Cell.DOOR_OPEN
                events.append("door_open")
                return DOOR_REWARD
        if inv.held == 0:
            for p in around:
                if s.cells[p] in (Cell.KEY1, Cell.KEY2):
                    inv.held = int(s.cells[p]) - int(Cell.KEY1) + 1
                    s.cells[p] = Cell.EMPTY
                    events.append("key_pickup")
                    return 0.0
        for p in around:
            if s.cells[p] == Cell.TREASURE and s.cells[s.extras["door"]] == Cell.DOOR_OPEN:
                s.done = True
                events.append("treasure")
                return treasure_reward(s.step_count, s.max_steps)
        return 0.0

    def door_open(self) -> bool:
        s = self.state
        return bool(s.cells[s.extras["door"]] == Cell.DOOR_OPEN)

