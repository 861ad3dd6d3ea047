"""Shared environment contract for the grid worlds.

Cell codes (stable, used in observations and logged trajectories):

    ====  ===============
    code  content
    ====  ===============
    0     empty floor
    1     wall (also out-of-bounds fill)
    2     closed door
    3     open door
    4     key 1
    5     key 2
    6     treasure chest
    7     warehouse
    8     agent (feature overlays and ASCII dumps only)
    9+t   item of type t
    ====  ===============

Primitive actions are absolute moves (no heading): UP=0, DOWN=1, LEFT=2,
RIGHT=3, INTERACT=4.
"""

from __future__ import annotations

import copy
import csv
import enum
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

MASK64 = (1 << 64) - 1


class ConfigError(ValueError):
    """Invalid environment or experiment configuration."""


class LifecycleError(RuntimeError):
    """Environment used outside its reset/step lifecycle."""


class Cell(enum.IntEnum):
    EMPTY = 0
    WALL = 1
    DOOR_CLOSED = 2
    DOOR_OPEN = 3
    KEY1 = 4
    KEY2 = 5
    TREASURE = 6
    WAREHOUSE = 7
    AGENT = 8
    ITEM0 = 9


def item_code(item_type: int) -> int:
    return int(Cell.ITEM0) + item_type


def num_codes(num_item_types: int = 0) -> int:
    return int(Cell.ITEM0) + num_item_types


class Action(enum.IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3
    INTERACT = 4


MOVES: dict[Action, tuple[int, int]] = {
    Action.UP: (-1, 0),
    Action.DOWN: (1, 0),
    Action.LEFT: (0, -1),
    Action.RIGHT: (0, 1),
}

# Action code written to trajectory logs for a time-advancing no-op.
WAIT_CODE = -1


class ObsMode(str, enum.Enum):
    FULL_MAP = "full_map"
    EGOCENTRIC = "egocentric"


def substream(seed: int, stream: int, *extra: int) -> np.random.Generator:
    """Independent PCG64 stream keyed by (seed, stream, *extra).

    Every placement decision draws from its own stream, so adding a new
    random element never shifts the draws of existing ones.
    """
    ss = np.random.SeedSequence(entropy=int(seed) & MASK64, spawn_key=(stream, *extra))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class InteractRules:
    """How the low-level planner should read an environment's cells.

    ``interact_from`` is ``"on"`` when Interact acts on the agent's own cell
    and ``"adjacent"`` when it acts on the 4-neighbourhood.
    """

    passable: frozenset
    interactable: frozenset
    interact_from: str


@dataclass
class GridState:
    """Full environment configuration (the MDP state)."""

    width: int
    height: int
    cells: np.ndarray  # (height, width) int16 codes, agent not drawn
    agent_pos: tuple[int, int]
    inventory: Any
    step_count: int
    max_steps: int
    done: bool = False
    extras: dict = field(default_factory=dict)

    def copy(self) -> "GridState":
        return GridState(
            width=self.width,
            height=self.height,
            cells=self.cells.copy(),
            agent_pos=self.agent_pos,
            inventory=self.inventory.copy(),
            step_count=self.step_count,
            max_steps=self.max_steps,
            done=self.done,
            extras=copy.deepcopy(self.extras),
        )

    def in_bounds(self, r: int, c: int) -> bool:
        return 0 <= r < self.height and 0 <= c < self.width


@dataclass(frozen=True)
class Observation:
    """Agent-visible slice of the state.

    ``window`` holds the flattened cell codes of the observation frame with
    the agent *not* drawn (so an item under the agent stays visible);
    ``agent`` is the agent's (row, col) inside the frame.
    """

    mode: ObsMode
    window: np.ndarray
    inventory_features: np.ndarray
    shape: tuple[int, int]
    agent: tuple[int, int]

    @property
    def window_size(self) -> int:
        return self.shape[0]

    def grid(self) -> np.ndarray:
        return self.window.reshape(self.shape)

    def frame_codes(self) -> np.ndarray:
        """Frame codes with the agent drawn on its cell."""
        g = self.grid().copy()
        g[self.agent] = Cell.AGENT
        return g.reshape(-1)


@dataclass
class StepOutcome:
    observation: Observation
    reward: float
    done: bool
    info: dict


def observe(state: GridState, mode: ObsMode, window: int | None = None) -> Observation:
    """Extract the observation of ``state`` in the given mode.

    Egocentric windows are centred on the agent and filled with the wall
    code outside the grid.
    """
    inv = np.asarray(state.inventory.features(), dtype=np.float64)
    mode = ObsMode(mode)
    if mode is ObsMode.FULL_MAP:
        return Observation(
            mode=mode,
            window=state.cells.reshape(-1).copy(),
            inventory_features=inv,
            shape=(state.height, state.width),
            agent=state.agent_pos,
        )
    if window is None or window < 1 or window % 2 == 0:
        raise ConfigError(f"egocentric window must be a positive odd integer, got {window}")
    half = window // 2
    padded = np.pad(state.cells, half, mode="constant", constant_values=int(Cell.WALL))
    r, c = state.agent_pos
    view = padded[r : r + window, c : c + window]
    return Observation(
        mode=mode,
        window=view.reshape(-1).copy(),
        inventory_features=inv,
        shape=(window, window),
        agent=(half, half),
    )


_ASCII = {
    Cell.EMPTY: ".",
    Cell.WALL: "#",
    Cell.DOOR_CLOSED: "D",
    Cell.DOOR_OPEN: "/",
    Cell.KEY1: "1",
    Cell.KEY2: "2",
    Cell.TREASURE: "T",
    Cell.WAREHOUSE: "W",
    Cell.AGENT: "@",
}


def ascii_char(code: int) -> str:
    if code >= Cell.ITEM0:
        return chr(ord("a") + code - Cell.ITEM0)
    return _ASCII[Cell(code)]


def ascii_dump(state: GridState) -> str:
    """One char per cell. Legend: ``.`` floor, ``#`` wall, ``D``/``/`` closed/open
    door, ``1``/``2`` keys, ``T`` treasure, ``W`` warehouse, ``@`` agent,
    ``a``..``u`` item types 0..20."""
    rows = []
    for r in range(state.height):
        row = []
        for c in range(state.width):
            code = Cell.AGENT if (r, c) == state.agent_pos else int(state.cells[r, c])
            row.append(ascii_char(code))
        rows.append("".join(row))
    return "\n".join(rows)


class TrajectoryLog:
    """Per-step CSV trajectory writer."""

    header = ["episode_id", "step", "action_code", "reward", "done", "event_tags"]

    def __init__(self, path):
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(self.header)

    def record(self, episode_id: int, outcome: StepOutcome, action_code: int) -> None:
        self._writer.writerow(
            [
                episode_id,
                outcome.info["step"],
                action_code,
                repr(float(outcome.reward)),
                int(outcome.done),
                ";".join(outcome.info["events"]),
            ]
        )

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class GridEnv:
    """Base class for the deterministic grid worlds.

    Subclasses build layouts in ``_generate`` and resolve ``Interact`` in
    ``_interact``; the base class owns movement, step counting, horizon
    termination and bookkeeping.
    """

    rules: InteractRules
    collision_penalty = 0.0

    def __init__(self, config):
        self.config = config
        self.state: GridState | None = None
        self.episode_return = 0.0
        self.on_step: Callable[[StepOutcome, int], None] | None = None

    # -- lifecycle -------------------------------------------------------
    @property
    def obs_mode(self) -> ObsMode:
        raise NotImplementedError

    @property
    def window(self) -> int | None:
        return self.config.window if self.obs_mode is ObsMode.EGOCENTRIC else None

    def reset(self, seed: int) -> Observation:
        self.state = self._generate(int(seed))
        self.episode_return = 0.0
        return self.observe()

    def observe(self) -> Observation:
        self._check_reset()
        return observe(self.state, self.obs_mode, self.window)

    def step(self, action) -> StepOutcome:
        action = Action(action)
        return self._advance(action)

    def wait(self) -> StepOutcome:
        """Advance time by one step without acting (empty macro plans)."""
        return self._advance(None)

    def to_ascii(self) -> str:
        self._check_reset()
        return ascii_dump(self.state)

    # -- internals -------------------------------------------------------
    def _check_reset(self) -> None:
        if self.state is None:
            raise LifecycleError("environment used before reset()")

    def _advance(self, action: Action | None) -> StepOutcome:
        self._check_reset()
        s = self.state
        if s.done:
            raise LifecycleError("step() called on a finished episode")
        events: list[str] = []
        reward = self._step_cost()
        s.step_count += 1
        collision = False
        if action is Action.INTERACT:
            reward += self._interact(events)
        elif action is not None:
            if not self._move(action):
                collision = True
                events.append("collision")
                reward += self.collision_penalty
        if not s.done and s.step_count >= s.max_steps:
            s.done = True
            events.append("timeout")
            reward += self._timeout_reward(events)
        self.episode_return += reward
        outcome = StepOutcome(
            observation=self.observe(),
            reward=float(reward),
            done=s.done,
            info={"collision": collision, "events": events, "step": s.step_count},
        )
        if self.on_step is not None:
            self.on_step(outcome, WAIT_CODE if action is None else int(action))
        return outcome

    def _move(self, action: Action) -> bool:
        s = self.state
        dr, dc = MOVES[action]
        r, c = s.agent_pos[0] + dr, s.agent_pos[1] + dc
        if not s.in_bounds(r, c) or not self._passable(int(s.cells[r, c])):
            return False
        s.agent_pos = (r, c)
        return True

    def _passable(self, code: int) -> bool:
        return code in self.rules.passable

    def _step_cost(self) -> float:
        return 0.0

    def _timeout_reward(self, events: list[str]) -> float:
        return 0.0

    def _interact(self, events: list[str]) -> float:
        raise NotImplementedError

    def _generate(self, seed: int) -> GridState:
        raise NotImplementedError
