"""Exact tabular references: value iteration, reward propagation, macro-level
value iteration and bisimulation partition refinement.

Conventions: ``P[s, a, s']`` is row-stochastic, distributions are row
vectors propagated as ``u @ P_pi``. Undiscounted evaluation uses a finite
horizon; a state with no available action ends the episode (value 0).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from gridhrl.envs.core import MOVES, Action, Cell, GridState, InteractRules, ObsMode, item_code, observe
from gridhrl.hierarchy import Goal, compute_mask, goal_space_size, plan


@dataclass
class TabularMDP:
    P: np.ndarray  # (n, m, n)
    R: np.ndarray  # (n, m)
    u0: np.ndarray  # (n,)
    horizon: int
    available: np.ndarray | None = None  # (n, m) bool, all true when None
    labels: list = field(default_factory=list)

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        self.R = np.asarray(self.R, dtype=np.float64)
        self.u0 = np.asarray(self.u0, dtype=np.float64)
        if self.available is None:
            self.available = np.ones(self.R.shape, dtype=bool)
        if not np.allclose(self.P.sum(-1), 1.0, atol=1e-12):
            raise ValueError("transition rows must sum to 1")

    @property
    def n(self) -> int:
        return self.R.shape[0]

    @property
    def m(self) -> int:
        return self.R.shape[1]

    @property
    def deterministic(self) -> bool:
        return bool(np.all((self.P == 0) | (self.P == 1)))

    def next_state(self, s: int, a: int) -> int:
        return int(np.argmax(self.P[s, a]))


# -- flat solvers -------------------------------------------------------------------


def value_iteration(mdp: TabularMDP, gamma: float, horizon: int | None = None):
    """Backward induction. Returns (V with ``horizon`` steps to go, policy of
    shape (horizon, n) where row t is the action at elapsed time t)."""
    H = mdp.horizon if horizon is None else horizon
    V = np.zeros(mdp.n)
    policy = np.zeros((H, mdp.n), dtype=np.int64)
    for t in range(H - 1, -1, -1):
        Q = mdp.R + gamma * mdp.P @ V
        Q = np.where(mdp.available, Q, -np.inf)
        has = mdp.available.any(axis=1)
        policy[t] = np.argmax(Q, axis=1)
        V = np.where(has, Q.max(axis=1, initial=-np.inf, where=mdp.available), 0.0)
    return V, policy


def _policy_tables(mdp: TabularMDP, pi: np.ndarray):
    """P_pi (n, n) and R_pi (n,) for a stochastic (n, m) or deterministic (n,) policy."""
    pi = np.asarray(pi)
    if pi.ndim == 1:
        pi = np.eye(mdp.m)[pi]
    pi = pi * mdp.available.any(axis=1, keepdims=True)  # terminal states collect nothing
    P_pi = np.einsum("sa,sat->st", pi, mdp.P)
    R_pi = (pi * mdp.R).sum(axis=1)
    stuck = ~mdp.available.any(axis=1)
    P_pi[stuck] = 0.0
    P_pi[stuck, np.flatnonzero(stuck)] = 1.0
    return P_pi, R_pi


def expected_reward_between(mdp: TabularMDP, policy, u, steps: int, gamma: float, start: int = 0) -> float:
    """sum_{t<steps} gamma^t u_t . R_pi, propagating u_{t+1} = u_t P_pi.

    ``policy`` is a stationary (n,)/(n, m) array or a time-indexed sequence
    of them; with a sequence, step t uses ``policy[start + t]``.
    """
    u = np.asarray(u, dtype=np.float64)
    seq = isinstance(policy, (list, tuple)) or np.asarray(policy).ndim == 3 or (
        np.asarray(policy).ndim == 2 and np.asarray(policy).dtype.kind in "iu"
    )
    total, disc = 0.0, 1.0
    for t in range(steps):
        P_pi, R_pi = _policy_tables(mdp, policy[start + t] if seq else policy)
        total += disc * float(u @ R_pi)
        u = u @ P_pi
        disc *= gamma
    return total


def distribution_after(mdp: TabularMDP, policy, u, steps: int) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    for t in range(steps):
        P_pi, _ = _policy_tables(mdp, policy[t])
        u = u @ P_pi
    return u


def monte_carlo_reward(mdp: TabularMDP, pi, u, steps: int, gamma: float, rng, rollouts: int = 100_000):
    """Simulated estimate of ``expected_reward_between`` for a stationary
    stochastic policy; returns (mean, standard error)."""
    pi = np.asarray(pi, dtype=np.float64)
    if pi.ndim == 1:
        pi = np.eye(mdp.m)[pi]
    s = rng.choice(mdp.n, size=rollouts, p=u)
    total = np.zeros(rollouts)
    alive = np.ones(rollouts, dtype=bool)
    disc = 1.0
    pi_cdf = np.cumsum(pi, axis=1)
    P_cdf = np.cumsum(mdp.P, axis=2)
    for _ in range(steps):
        alive &= mdp.available[s].any(axis=1)
        a = np.minimum((rng.random(rollouts)[:, None] > pi_cdf[s]).sum(axis=1), mdp.m - 1)
        total += np.where(alive, disc * mdp.R[s, a], 0.0)
        nxt = np.minimum((rng.random(rollouts)[:, None] > P_cdf[s, a]).sum(axis=1), mdp.n - 1)
        s = np.where(alive, nxt, s)
        disc *= gamma
    return total.mean(), total.std(ddof=1) / np.sqrt(rollouts)


def brute_force_optimum(mdp: TabularMDP, gamma: float, horizon: int) -> float:
    """Best value of u0 over every deterministic time-indexed policy."""
    best = -np.inf
    choices = [np.flatnonzero(mdp.available[s]) if mdp.available[s].any() else np.array([0]) for s in range(mdp.n)]
    per_step = list(itertools.product(*choices))
    for plan_ in itertools.product(per_step, repeat=horizon):
        val = expected_reward_between(mdp, [np.array(p) for p in plan_], mdp.u0, horizon, gamma)
        best = max(best, val)
    return best


# -- macro-level solver -------------------------------------------------------------


@dataclass
class Macro:
    actions: tuple[int, ...]
    rewards: tuple[float, ...]
    states: tuple[int, ...]  # state after each action

    @property
    def duration(self) -> int:
        return len(self.actions)


def rollout_macro(mdp: TabularMDP, s: int, actions) -> Macro:
    rewards, states = [], []
    for a in actions:
        if not mdp.available[s, a]:
            raise ValueError(f"macro uses unavailable action {a} in state {s}")
        rewards.append(float(mdp.R[s, a]))
        s = mdp.next_state(s, a)
        states.append(s)
    return Macro(tuple(int(a) for a in actions), tuple(rewards), tuple(states))


def uncovered_actions(mdp: TabularMDP, macros: dict[int, list[Macro]]) -> list[tuple[int, int]]:
    """(state, action) pairs whose primitive action is not a length-1 macro."""
    missing = []
    for s in range(mdp.n):
        singles = {m.actions[0] for m in macros.get(s, []) if m.duration == 1}
        for a in np.flatnonzero(mdp.available[s]):
            if int(a) not in singles:
                missing.append((s, int(a)))
    return missing


class CoverageError(ValueError):
    def __init__(self, missing):
        super().__init__(f"goal space leaves {len(missing)} primitive (state, action) pairs uncovered: {missing[:5]}")
        self.missing = missing


def hierarchical_optimal_return(
    mdp: TabularMDP, macros: dict[int, list[Macro]], horizon: int | None = None, strict: bool = True
) -> float:
    """Optimal undiscounted return when every decision picks a macro.

    Value iteration over (state, steps left); a macro longer than the
    remaining budget contributes only the rewards that fit. Zero-length
    macros are ignored. With ``strict`` the coverage precondition is
    enforced and violations raise ``CoverageError``.
    """
    H = mdp.horizon if horizon is None else horizon
    if strict:
        missing = uncovered_actions(mdp, macros)
        if missing:
            raise CoverageError(missing)
    V = np.zeros((H + 1, mdp.n))
    prefix = {s: [(m, np.concatenate([[0.0], np.cumsum(m.rewards)])) for m in macros.get(s, []) if m.duration]
              for s in range(mdp.n)}
    for left in range(1, H + 1):
        for s in range(mdp.n):
            best = None
            for m, cum in prefix[s]:
                if m.duration <= left:
                    v = cum[-1] + V[left - m.duration, m.states[-1]]
                else:
                    v = cum[left]
                best = v if best is None else max(best, v)
            V[left, s] = 0.0 if best is None else best
    return float(mdp.u0 @ V[H])


def primitive_macros(mdp: TabularMDP) -> dict[int, list[Macro]]:
    return {s: [rollout_macro(mdp, s, [a]) for a in np.flatnonzero(mdp.available[s])] for s in range(mdp.n)}


# -- gridworlds ----------------------------------------------------------------------

GRID_RULES = InteractRules(
    passable=frozenset({int(Cell.EMPTY), item_code(0)}),
    interactable=frozenset({item_code(0)}),
    interact_from="on",
)


@dataclass
class Gridworld:
    cells: np.ndarray  # codes: EMPTY, WALL or item_code(0)
    mdp: TabularMDP
    positions: list[tuple[int, int]]  # state index -> (row, col)


class _NoInventory:
    def features(self):
        return np.zeros(1)

    def copy(self):
        return self


def gridworld_mdp(cells: np.ndarray, move_reward: np.ndarray, interact_reward: np.ndarray, u0=None, horizon=None):
    """Deterministic agent-position MDP over the non-wall cells.

    Moves into walls or the boundary are unavailable; Interact is available
    only on item cells, keeps the agent in place and pays the cell's reward.
    ``move_reward`` has shape (rows, cols, 4) indexed by the start cell.
    """
    rows, cols = cells.shape
    positions = [(r, c) for r in range(rows) for c in range(cols) if cells[r, c] != Cell.WALL]
    index = {p: i for i, p in enumerate(positions)}
    n, m = len(positions), len(Action)
    P = np.zeros((n, m, n))
    R = np.zeros((n, m))
    avail = np.zeros((n, m), dtype=bool)
    for i, (r, c) in enumerate(positions):
        P[i, :, i] = 1.0
        for a in (Action.UP, Action.DOWN, Action.LEFT, Action.RIGHT):
            dr, dc = MOVES[a]
            j = index.get((r + dr, c + dc))
            if j is not None:
                P[i, a] = 0.0
                P[i, a, j] = 1.0
                R[i, a] = move_reward[r, c, a]
                avail[i, a] = True
        if cells[r, c] == item_code(0):
            R[i, Action.INTERACT] = interact_reward[r, c]
            avail[i, Action.INTERACT] = True
    if u0 is None:
        u0 = np.full(n, 1.0 / n)
    mdp = TabularMDP(P, R, u0, 4 * n if horizon is None else horizon, avail, labels=positions)
    return Gridworld(cells, mdp, positions)


def random_gridworld(rng: np.random.Generator, max_side: int = 5, horizon: int | None = None) -> Gridworld:
    rows, cols = (int(x) for x in rng.integers(2, max_side + 1, size=2))
    while True:
        cells = rng.choice(
            np.array([Cell.EMPTY, Cell.WALL, item_code(0)], dtype=np.int16), size=(rows, cols), p=[0.6, 0.2, 0.2]
        )
        if (cells != Cell.WALL).sum() >= 2:
            break
    # rewards on a 1/8 grid keep sums exact in binary floating point
    move = rng.integers(-8, 3, size=(rows, cols, 4)) / 8.0
    inter = rng.integers(0, 17, size=(rows, cols)) / 8.0
    return gridworld_mdp(cells, move, inter, horizon=horizon)


def window_macros(world: Gridworld, window: int = 5, keep=None) -> dict[int, list[Macro]]:
    """Macros induced by the real goal mask and planner in egocentric windows.

    ``keep(goal, agent_in_frame)`` optionally filters the goal space.
    """
    rows, cols = world.cells.shape
    index = {p: i for i, p in enumerate(world.positions)}
    out: dict[int, list[Macro]] = {}
    for s, pos in enumerate(world.positions):
        state = GridState(cols, rows, world.cells.copy(), pos, _NoInventory(), 0, 1)
        obs = observe(state, ObsMode.EGOCENTRIC, window)
        mask = compute_mask(obs, GRID_RULES)
        out[s] = []
        for gi in range(goal_space_size(obs.shape)):
            if not mask[gi]:
                continue
            goal = Goal.from_index(gi, obs.shape)
            if keep is not None and not keep(goal, obs.agent):
                continue
            actions = [int(a) for a in plan(obs, goal, GRID_RULES)]
            macro = rollout_macro(world.mdp, s, actions)
            end = macro.states[-1] if actions else s
            dr, dc = goal.row - obs.agent[0], goal.col - obs.agent[1]
            assert world.positions[end] == (pos[0] + dr, pos[1] + dc) and index[world.positions[end]] == end
            out[s].append(macro)
    return out


def no_upward_goals(goal: Goal, agent: tuple[int, int]) -> bool:
    return goal.row >= agent[0]


def counterexample_world() -> Gridworld:
    """A one-column corridor whose only reward sits above the start."""
    cells = np.array([[item_code(0)], [Cell.EMPTY], [Cell.EMPTY]], dtype=np.int16)
    move = np.zeros((3, 1, 4))
    inter = np.zeros((3, 1))
    inter[0, 0] = 1.0
    u0 = np.array([0.0, 0.0, 1.0])
    return gridworld_mdp(cells, move, inter, u0=u0, horizon=6)


# -- bisimulation ------------------------------------------------------------------------


def bisim_partition(mdp: TabularMDP, action_order=None, initial=None) -> list[frozenset[int]]:
    """Coarsest partition where members share rewards and successor blocks.

    Starts from one block (or ``initial``) and splits until nothing changes. ``action_order``
    controls which action's signature is applied first within each round;
    the fixed point does not depend on it.
    """
    if not mdp.deterministic:
        raise ValueError("bisimulation partition needs deterministic transitions")
    succ = np.argmax(mdp.P, axis=2)
    order = list(range(mdp.m)) if action_order is None else list(action_order)
    block = np.zeros(mdp.n, dtype=np.int64)
    for i, b in enumerate(initial or []):
        block[list(b)] = i
    while True:
        before = len(set(block.tolist()))
        for a in order:
            keys = [(block[s], mdp.R[s, a], block[succ[s, a]]) for s in range(mdp.n)]
            block = _relabel(keys)
        if len(set(block.tolist())) == before:
            break
    groups: dict[int, set[int]] = {}
    for s, b in enumerate(block.tolist()):
        groups.setdefault(b, set()).add(s)
    return sorted((frozenset(g) for g in groups.values()), key=min)


def _relabel(keys) -> np.ndarray:
    ids: dict = {}
    return np.array([ids.setdefault(k, len(ids)) for k in keys], dtype=np.int64)


def is_bisimulation(mdp: TabularMDP, blocks) -> bool:
    label = np.empty(mdp.n, dtype=np.int64)
    for i, b in enumerate(blocks):
        label[list(b)] = i
    succ = np.argmax(mdp.P, axis=2)
    for b in blocks:
        members = sorted(b)
        ref = members[0]
        for s in members[1:]:
            if not np.array_equal(mdp.R[s], mdp.R[ref]) or not np.array_equal(label[succ[s]], label[succ[ref]]):
                return False
    return True


def crafted_bisim_mdp() -> TabularMDP:
    """Six states, two actions, three bisimulation blocks {0,1}, {2,3}, {4,5}.

    Block A pays 1 for action 0 and moves to block B; block B returns to A
    or stays; block C only loops on itself. B and C share rewards (all 0)
    and are told apart only through their successors.
    """
    succ = {0: (2, 4), 1: (2, 4), 2: (0, 3), 3: (0, 3), 4: (4, 5), 5: (4, 5)}
    P = np.zeros((6, 2, 6))
    R = np.zeros((6, 2))
    for s, nxt in succ.items():
        for a, t in enumerate(nxt):
            P[s, a, t] = 1.0
    R[0, 0] = R[1, 0] = 1.0
    return TabularMDP(P, R, np.full(6, 1 / 6), 24)


CRAFTED_BLOCKS = [frozenset({0, 1}), frozenset({2, 3}), frozenset({4, 5})]


def random_mdp(rng: np.random.Generator, n: int, m: int, horizon: int, deterministic: bool = False) -> TabularMDP:
    if deterministic:
        P = np.zeros((n, m, n))
        P[np.arange(n)[:, None], np.arange(m)[None, :], rng.integers(n, size=(n, m))] = 1.0
    else:
        P = rng.random((n, m, n)) ** 3
        P /= P.sum(-1, keepdims=True)
    R = rng.normal(size=(n, m))
    u0 = rng.random(n)
    return TabularMDP(P, R, u0 / u0.sum(), horizon)
