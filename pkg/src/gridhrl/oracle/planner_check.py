"""Brute-force reference for the low-level planner and the goal mask.

All-pairs shortest paths come from Floyd-Warshall over the window's cell
graph, which shares no code with the BFS planner.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gridhrl.envs.core import MOVES, Action, Cell, InteractRules, Observation, ObsMode, item_code
from gridhrl.hierarchy import Goal, GoalKind, compute_mask, plan

INF = 10**9

DOORKEY_RULES = InteractRules(
    passable=frozenset({int(Cell.EMPTY), int(Cell.DOOR_OPEN)}),
    interactable=frozenset({int(Cell.DOOR_CLOSED), int(Cell.KEY1), int(Cell.KEY2), int(Cell.TREASURE)}),
    interact_from="adjacent",
)
MULTIITEM_RULES = InteractRules(
    passable=frozenset({int(Cell.EMPTY), int(Cell.WAREHOUSE), item_code(0), item_code(1), item_code(2)}),
    interactable=frozenset({int(Cell.WAREHOUSE), item_code(0), item_code(1), item_code(2)}),
    interact_from="on",
)


def random_window(rng: np.random.Generator, size: int, rules: InteractRules) -> Observation:
    """Egocentric window with random walls and objects around a centred agent."""
    if rules.interact_from == "adjacent":
        palette = [Cell.EMPTY, Cell.WALL, Cell.DOOR_CLOSED, Cell.DOOR_OPEN, Cell.KEY1, Cell.KEY2, Cell.TREASURE]
        weights = [0.45, 0.3, 0.05, 0.05, 0.05, 0.05, 0.05]
    else:
        palette = [Cell.EMPTY, Cell.WALL, Cell.WAREHOUSE, item_code(0), item_code(1), item_code(2)]
        weights = [0.4, 0.3, 0.05, 0.1, 0.1, 0.05]
    wall_p = rng.uniform(0.1, 0.5)
    weights = np.asarray(weights, dtype=float)
    weights[1] = wall_p
    weights /= weights.sum()
    grid = rng.choice(np.asarray(palette, dtype=np.int16), size=(size, size), p=weights)
    centre = (size // 2, size // 2)
    grid[centre] = Cell.EMPTY
    return Observation(
        mode=ObsMode.EGOCENTRIC,
        window=grid.reshape(-1),
        inventory_features=np.zeros(1),
        shape=(size, size),
        agent=centre,
    )


def all_pairs_distances(obs: Observation, rules: InteractRules) -> np.ndarray:
    grid = obs.grid()
    rows, cols = grid.shape
    n = rows * cols
    ok = np.isin(grid, list(rules.passable)).reshape(-1)
    ok[obs.agent[0] * cols + obs.agent[1]] = True
    d = np.full((n, n), INF, dtype=np.int64)
    np.fill_diagonal(d, 0)
    for u in range(n):
        if not ok[u]:
            continue
        r, c = divmod(u, cols)
        for dr, dc in MOVES.values():
            rr, cc = r + dr, c + dc
            if 0 <= rr < rows and 0 <= cc < cols and ok[rr * cols + cc]:
                d[u, rr * cols + cc] = 1
    for k in range(n):
        d = np.minimum(d, d[:, k : k + 1] + d[k : k + 1, :])
    return d


@dataclass
class WindowReport:
    goals_checked: int = 0
    failures: list = None

    def __post_init__(self):
        if self.failures is None:
            self.failures = []


def check_window(obs: Observation, rules: InteractRules, report: WindowReport) -> None:
    """Compare mask and plan against the brute-force distances for every goal."""
    grid = obs.grid()
    rows, cols = grid.shape
    d = all_pairs_distances(obs, rules)
    ok = np.isin(grid, list(rules.passable))
    ok[obs.agent] = True
    src = obs.agent[0] * cols + obs.agent[1]
    mask = compute_mask(obs, rules)
    for idx in range(2 * rows * cols):
        goal = Goal.from_index(idx, (rows, cols))
        t = (goal.row, goal.col)
        if goal.kind is GoalKind.MOVE:
            stands = [t] if ok[t] else []
        elif int(grid[t]) not in rules.interactable:
            stands = []
        elif rules.interact_from == "on":
            stands = [t] if ok[t] else []
        else:
            stands = [
                (t[0] + dr, t[1] + dc)
                for dr, dc in MOVES.values()
                if 0 <= t[0] + dr < rows and 0 <= t[1] + dc < cols and ok[t[0] + dr, t[1] + dc]
            ]
        best = min((d[src, s[0] * cols + s[1]] for s in stands), default=INF)
        expect_valid = best < INF
        report.goals_checked += 1
        if bool(mask[idx]) != expect_valid:
            report.failures.append(("mask", idx, bool(mask[idx]), expect_valid))
            continue
        if not expect_valid:
            continue
        actions = plan(obs, goal, rules)
        moves = [a for a in actions if a is not Action.INTERACT]
        want = best + (1 if goal.kind is GoalKind.MOVE_AND_INTERACT else 0)
        if len(actions) != want:
            report.failures.append(("length", idx, len(actions), want))
            continue
        pos = obs.agent
        for a in moves:
            dr, dc = MOVES[a]
            pos = (pos[0] + dr, pos[1] + dc)
            if not (0 <= pos[0] < rows and 0 <= pos[1] < cols and ok[pos]):
                report.failures.append(("path", idx, pos))
                break
        else:
            if pos not in stands:
                report.failures.append(("endpoint", idx, pos))
