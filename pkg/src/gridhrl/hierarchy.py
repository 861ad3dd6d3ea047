"""Composite-action goal space, validity mask and the rule-based low-level planner.

A goal is a target cell of the observation frame plus an action type
(``MOVE`` or ``MOVE_AND_INTERACT``), packed as
``flat = kind * rows * cols + row * cols + col``.
"""

from __future__ import annotations

import csv
import enum
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from gridhrl.envs.core import MOVES, WAIT_CODE, Action, InteractRules, Observation

# Fixed tie-breaking order among equally short paths.
_ORDER = (Action.UP, Action.DOWN, Action.LEFT, Action.RIGHT)
_OFFSETS = tuple(MOVES[a] for a in _ORDER)


class PlanningError(ValueError):
    """Raised when asked to plan for a goal that fails the validity check."""


class GoalKind(enum.IntEnum):
    MOVE = 0
    MOVE_AND_INTERACT = 1


@dataclass(frozen=True)
class Goal:
    row: int
    col: int
    kind: GoalKind

    def flat_index(self, shape: tuple[int, int]) -> int:
        rows, cols = shape
        return int(self.kind) * rows * cols + self.row * cols + self.col

    @classmethod
    def from_index(cls, index: int, shape: tuple[int, int]) -> "Goal":
        rows, cols = shape
        if not 0 <= index < 2 * rows * cols:
            raise IndexError(f"goal index {index} outside goal space of size {2 * rows * cols}")
        kind, rest = divmod(int(index), rows * cols)
        r, c = divmod(rest, cols)
        return cls(r, c, GoalKind(kind))


def goal_space_size(shape: tuple[int, int]) -> int:
    return 2 * shape[0] * shape[1]


def _passable_grid(obs: Observation, rules: InteractRules) -> np.ndarray:
    grid = obs.grid()
    mask = np.isin(grid, list(rules.passable))
    mask[obs.agent] = True
    return mask


def bfs_distances(passable: np.ndarray, sources) -> np.ndarray:
    """4-connected BFS distances from ``sources`` through passable cells (-1 = unreachable)."""
    h, w = passable.shape
    dist = np.full((h, w), -1, dtype=np.int64)
    queue = deque()
    for s in sources:
        if dist[s] < 0:
            dist[s] = 0
            queue.append(s)
    while queue:
        r, c = queue.popleft()
        d = dist[r, c] + 1
        for dr, dc in _OFFSETS:
            nr, nc = r + dr, c + dc
            if 0 <= nr < h and 0 <= nc < w and passable[nr, nc] and dist[nr, nc] < 0:
                dist[nr, nc] = d
                queue.append((nr, nc))
    return dist


def standing_cells(obs: Observation, target: tuple[int, int], rules: InteractRules, passable=None):
    """Cells from which Interact reaches ``target`` under the environment's rules."""
    if passable is None:
        passable = _passable_grid(obs, rules)
    if rules.interact_from == "on":
        return [target] if passable[target] else []
    h, w = passable.shape
    out = []
    for dr, dc in _OFFSETS:
        r, c = target[0] + dr, target[1] + dc
        if 0 <= r < h and 0 <= c < w and passable[r, c]:
            out.append((r, c))
    return out


def compute_mask(obs: Observation, rules: InteractRules) -> np.ndarray:
    """Validity bits over the full goal space of ``obs``.

    Move goals need a passable target reachable from the agent inside the
    frame. Move-and-interact goals need an interactable target with at
    least one reachable standing cell. The agent's own cell with ``MOVE``
    is always valid, so the mask is never empty.
    """
    grid = obs.grid()
    rows, cols = grid.shape
    passable = _passable_grid(obs, rules)
    reach = bfs_distances(passable, [obs.agent]) >= 0
    move = reach & passable
    interactable = np.isin(grid, list(rules.interactable))
    if rules.interact_from == "on":
        inter = interactable & move
    else:
        # a target qualifies if any 4-neighbour is reachable
        near = np.zeros_like(reach)
        near[1:, :] |= reach[:-1, :]
        near[:-1, :] |= reach[1:, :]
        near[:, 1:] |= reach[:, :-1]
        near[:, :-1] |= reach[:, 1:]
        inter = interactable & near
    mask = np.concatenate([move.reshape(-1), inter.reshape(-1)])
    mask[obs.agent[0] * cols + obs.agent[1]] = True
    return mask


def plan(obs: Observation, goal: Goal, rules: InteractRules) -> list[Action]:
    """Shortest primitive action sequence realising ``goal``.

    Among equally short paths the lexicographically smallest under
    Up < Down < Left < Right is returned. ``MOVE_AND_INTERACT`` appends
    Interact at the standing cell.
    """
    grid = obs.grid()
    rows, cols = grid.shape
    if not (0 <= goal.row < rows and 0 <= goal.col < cols):
        raise PlanningError(f"goal {goal} outside the observation frame")
    passable = _passable_grid(obs, rules)
    target = (goal.row, goal.col)
    if goal.kind is GoalKind.MOVE:
        if not passable[target]:
            raise PlanningError(f"move target {target} is not passable")
        ends = [target]
    else:
        if int(grid[target]) not in rules.interactable:
            raise PlanningError(f"interact target {target} holds no interactable object")
        ends = standing_cells(obs, target, rules, passable)
    to_goal = bfs_distances(passable, ends)
    pos = obs.agent
    if to_goal[pos] < 0:
        raise PlanningError(f"goal {goal} unreachable from {pos}")
    actions: list[Action] = []
    while to_goal[pos] > 0:
        want = to_goal[pos] - 1
        for a, (dr, dc) in zip(_ORDER, _OFFSETS):
            r, c = pos[0] + dr, pos[1] + dc
            if 0 <= r < rows and 0 <= c < cols and to_goal[r, c] == want:
                actions.append(a)
                pos = (r, c)
                break
    if goal.kind is GoalKind.MOVE_AND_INTERACT:
        actions.append(Action.INTERACT)
    return actions


@dataclass
class MacroTransition:
    start_obs: Observation
    goal: Goal
    actions: list[int]  # executed primitive codes, WAIT_CODE for an idle tick
    rewards: list[float]
    next_obs: Observation
    done: bool
    events: list[str] = field(default_factory=list)

    @property
    def duration(self) -> int:
        return len(self.actions)

    @property
    def accumulated_reward(self) -> float:
        return float(sum(self.rewards))


def execute_macro(env, obs: Observation, goal: Goal) -> MacroTransition:
    """Run the planned sequence open-loop until it ends or the episode does.

    An empty plan (own cell, ``MOVE``) spends one idle environment tick so
    every decision advances time.
    """
    actions = plan(obs, goal, env.rules)
    executed: list[int] = []
    rewards: list[float] = []
    events: list[str] = []
    next_obs, done = obs, False
    if not actions:
        out = env.wait()
        executed.append(WAIT_CODE)
        rewards.append(out.reward)
        events.extend(out.info["events"])
        next_obs, done = out.observation, out.done
    for a in actions:
        out = env.step(a)
        executed.append(int(a))
        rewards.append(out.reward)
        events.extend(out.info["events"])
        next_obs, done = out.observation, out.done
        if done:
            break
    return MacroTransition(obs, goal, executed, rewards, next_obs, done, events)


def single_action_goals(obs: Observation, rules: InteractRules, allowed=None) -> dict[Action, int]:
    """Map each primitive move available from the agent's cell to a valid goal
    whose plan is exactly that move (empty entries mean uncovered)."""
    mask = compute_mask(obs, rules)
    shape = obs.shape
    passable = _passable_grid(obs, rules)
    covered: dict[Action, int] = {}
    for a, (dr, dc) in zip(_ORDER, _OFFSETS):
        r, c = obs.agent[0] + dr, obs.agent[1] + dc
        if not (0 <= r < shape[0] and 0 <= c < shape[1] and passable[r, c]):
            continue
        idx = Goal(r, c, GoalKind.MOVE).flat_index(shape)
        if mask[idx] and (allowed is None or idx in allowed):
            covered[a] = idx
    return covered


def available_moves(obs: Observation, rules: InteractRules) -> list[Action]:
    passable = _passable_grid(obs, rules)
    rows, cols = obs.shape
    out = []
    for a, (dr, dc) in zip(_ORDER, _OFFSETS):
        r, c = obs.agent[0] + dr, obs.agent[1] + dc
        if 0 <= r < rows and 0 <= c < cols and passable[r, c]:
            out.append(a)
    return out


class MacroLog:
    """CSV of high-level decisions."""

    header = ["decision_index", "goal_flat_index", "duration", "accumulated_reward", "mask_cardinality"]

    def __init__(self, path):
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(self.header)

    def record(self, decision_index: int, goal_index: int, macro: MacroTransition, mask: np.ndarray):
        self._writer.writerow(
            [decision_index, goal_index, macro.duration, repr(macro.accumulated_reward), int(mask.sum())]
        )

    def close(self):
        self._fh.close()
