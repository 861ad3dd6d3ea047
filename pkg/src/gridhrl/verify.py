"""Executable property suite behind ``gridhrl verify``.

Each property returns a ``PropertyResult`` with how many cases it checked,
how long it took and any counterexamples. ``fault="missing-up"`` removes
upward goals from the hierarchical goal space to demonstrate that the
coverage precondition is detected.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .abstraction import AbstractionConfig, AbstractionModel, AbstractionTrainer, bisim_loss
from .nn import Lstm, LstmSpec, Mlp, MlpSpec, generator
from .oracle.gradcheck import gradient_check
from .oracle.mdp import (
    CRAFTED_BLOCKS,
    CoverageError,
    TabularMDP,
    bisim_partition,
    counterexample_world,
    crafted_bisim_mdp,
    hierarchical_optimal_return,
    is_bisimulation,
    no_upward_goals,
    random_gridworld,
    uncovered_actions,
    value_iteration,
    window_macros,
)
from .oracle.planner_check import DOORKEY_RULES, MULTIITEM_RULES, WindowReport, check_window, random_window
from .oracle.returns import lambda_return_advantages
from .ppo import ActorCritic, PpoConfig, gae, masked_log_probs, ppo_loss

FAULTS = ("missing-up",)
D = torch.float64


@dataclass
class PropertyResult:
    name: str
    passed: bool
    checked: int
    seconds: float = 0.0
    failures: list = field(default_factory=list)
    detail: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = " ".join(f"{k}={v}" for k, v in self.detail.items())
        return f"[{status}] {self.name}: {self.checked} checked, {len(self.failures)} failed, {self.seconds:.2f}s {extra}".rstrip()


def _timed(fn):
    def run(*args, **kw):
        t = time.perf_counter()
        res = fn(*args, **kw)
        res.seconds = time.perf_counter() - t
        return res

    run.__name__ = fn.__name__
    run.__doc__ = fn.__doc__
    return run


def format_mdp(mdp: TabularMDP) -> str:
    """Plain-text table: one ``state action next prob reward available`` row per entry."""
    rows = ["# n={} m={} horizon={}".format(mdp.n, mdp.m, mdp.horizon), "state\taction\tnext\tprob\treward\tavailable"]
    for s in range(mdp.n):
        for a in range(mdp.m):
            for t in np.flatnonzero(mdp.P[s, a]):
                rows.append(f"{s}\t{a}\t{t}\t{mdp.P[s, a, t]!r}\t{mdp.R[s, a]!r}\t{int(mdp.available[s, a])}")
    rows.append("u0\t" + "\t".join(repr(float(x)) for x in mdp.u0))
    return "\n".join(rows)


# -- properties ------------------------------------------------------------------------------


@_timed
def check_hierarchical_optimality(n_worlds: int = 20, window: int = 5, seed: int = 2024, fault: str | None = None) -> PropertyResult:
    """Hierarchical optimum equals the flat optimum at gamma=1 on random gridworlds."""
    keep = no_upward_goals if fault == "missing-up" else None
    rng = np.random.default_rng(seed)
    failures, gaps = [], []
    for i in range(n_worlds):
        world = random_gridworld(rng)
        mdp = world.mdp
        macros = window_macros(world, window, keep=keep)
        V, _ = value_iteration(mdp, 1.0)
        flat = float(mdp.u0 @ V)
        try:
            hier = hierarchical_optimal_return(mdp, macros)
        except CoverageError as exc:
            failures.append({"world": i, "reason": "coverage", "uncovered": exc.missing[:10], "mdp": format_mdp(mdp)})
            continue
        gaps.append(abs(hier - flat))
        if abs(hier - flat) > 1e-9:
            failures.append({"world": i, "reason": "value", "flat": flat, "hierarchical": hier, "mdp": format_mdp(mdp)})
    return PropertyResult(
        "hierarchical-optimality", not failures, n_worlds, failures=failures,
        detail={"max_gap": max(gaps, default=0.0)},
    )


@_timed
def check_counterexample() -> PropertyResult:
    """Without upward goals the hierarchical optimum falls below the flat one."""
    world = counterexample_world()
    macros = window_macros(world, 5, keep=no_upward_goals)
    V, _ = value_iteration(world.mdp, 1.0)
    flat = float(world.mdp.u0 @ V)
    hier = hierarchical_optimal_return(world.mdp, macros, strict=False)
    missing = uncovered_actions(world.mdp, macros)
    ok = hier < flat and bool(missing)
    fails = [] if ok else [{"flat": flat, "hierarchical": hier, "mdp": format_mdp(world.mdp)}]
    return PropertyResult("coverage-counterexample", ok, 1, failures=fails,
                          detail={"flat": flat, "hierarchical": hier, "uncovered": len(missing)})


@_timed
def check_bisim_partition() -> PropertyResult:
    mdp = crafted_bisim_mdp()
    blocks = bisim_partition(mdp)
    ok = blocks == CRAFTED_BLOCKS and is_bisimulation(mdp, blocks)
    fails = [] if ok else [{"blocks": [sorted(b) for b in blocks], "mdp": format_mdp(mdp)}]
    return PropertyResult("bisim-partition", ok, 1, failures=fails, detail={"blocks": len(blocks)})


def train_crafted_abstraction(seed: int = 0, steps: int = 1500) -> AbstractionModel:
    """Fit an abstraction to every transition of the crafted bisimulation MDP."""
    mdp = crafted_bisim_mdp()
    succ = np.argmax(mdp.P, axis=2)
    cfg = AbstractionConfig(dim_z=4, hidden=(16,), head_hidden=(16,), batch_size=32, tf=steps, lr=1e-2)
    model = AbstractionModel(mdp.n, mdp.m, cfg, generator(seed))
    trainer = AbstractionTrainer(model, lambda x: x.float(), cfg, np.random.default_rng(seed))
    eye = np.eye(mdp.n, dtype=np.float32)
    for _ in range(20):
        for s in range(mdp.n):
            for a in range(mdp.m):
                trainer.buffer.add(eye[s], None, a, mdp.R[s, a], eye[succ[s, a]], None)
    trainer.train()
    return model


@_timed
def check_abstraction_consistency(tol: float = 0.05, seed: int = 0) -> PropertyResult:
    """Bisimilar states get matching reward and transition predictions."""
    mdp = crafted_bisim_mdp()
    model = train_crafted_abstraction(seed)
    with torch.no_grad():
        z = model.encode(torch.eye(mdp.n))
        r_hat = model.reward_head(z)
        p_hat = model.transition_head(z).view(mdp.n, mdp.m, -1)
    failures, worst_r, worst_p = [], 0.0, 0.0
    checked = 0
    for block in bisim_partition(mdp):
        members = sorted(block)
        for s1 in members:
            for s2 in members:
                if s1 >= s2:
                    continue
                checked += 1
                dr = float(torch.max(torch.abs(r_hat[s1] - r_hat[s2])))
                dp = float(torch.max(torch.linalg.norm(p_hat[s1] - p_hat[s2], dim=-1)))
                worst_r, worst_p = max(worst_r, dr), max(worst_p, dp)
                if dr >= tol or dp >= tol:
                    failures.append({"pair": (s1, s2), "reward_gap": dr, "transition_gap": dp})
    return PropertyResult("abstraction-consistency", not failures, checked, failures=failures,
                          detail={"max_reward_gap": round(worst_r, 6), "max_transition_gap": round(worst_p, 6)})


@_timed
def check_planner(n_windows: int = 1000, seed: int = 7) -> PropertyResult:
    """Plan lengths match exhaustive shortest paths; masks are sound and complete."""
    rng = np.random.default_rng(seed)
    report = WindowReport()
    windows = 0
    for size in (5, 7):
        for i in range(n_windows):
            rules = DOORKEY_RULES if i % 2 == 0 else MULTIITEM_RULES
            check_window(random_window(rng, size, rules), rules, report)
            windows += 1
    return PropertyResult("planner-optimality", not report.failures, windows, failures=report.failures[:20],
                          detail={"goals": report.goals_checked})


def _mlp_case(i):
    net = Mlp(MlpSpec((4, 6, 3)), generator(i), D)
    x = torch.randn(5, 4, dtype=D, generator=generator(10_000 + i))
    return (lambda: net(x).pow(2).sum()), list(net.parameters())


def _lstm_case(i):
    lstm = Lstm(LstmSpec(3, 4), generator(i), D)
    g = generator(10_000 + i)
    seq = torch.randn(2, 5, 3, dtype=D, generator=g)
    valid = torch.tensor([[False, True, True, True, True], [True] * 5])
    w = torch.randn(4, dtype=D, generator=g)
    return (lambda: (lstm(seq, valid)[1] @ w).sum() + lstm(seq, valid)[0].pow(2).mean()), list(lstm.parameters())


def _bisim_case(i):
    cfg = AbstractionConfig(dim_z=3, lstm_hidden=4, head_hidden=(5,))
    model = AbstractionModel(3, 4, cfg, generator(i), recurrent=True, dtype=D)
    g = generator(10_000 + i)
    x = torch.randn(6, 3, 3, dtype=D, generator=g)
    x2 = torch.randn(6, 3, 3, dtype=D, generator=g)
    goals = torch.randint(0, 4, (6,), generator=g)
    r = torch.randn(6, dtype=D, generator=g)
    with torch.no_grad():
        target = model.encode(x2)
    return (lambda: bisim_loss(model, x, goals, r, lam=1.0, z_next=target)[0]), list(model.parameters())


def _ppo_case(i):
    net = ActorCritic(5, 6, generator(i), hidden=(6,), dtype=D)
    g = generator(10_000 + i)
    x = torch.randn(8, 5, dtype=D, generator=g)
    masks = torch.rand(8, 6, generator=g) < 0.6
    masks[:, 0] = True
    actions = torch.tensor([int(torch.nonzero(m)[torch.randint(0, int(m.sum()), (1,), generator=g)]) for m in masks])
    with torch.no_grad():
        logp = masked_log_probs(net(x)[0], masks).gather(-1, actions[:, None]).squeeze(-1)
    mb = {
        "inputs": x,
        "actions": actions,
        "masks": masks,
        "old_log_probs": logp + 0.1 * torch.randn(8, dtype=D, generator=g),
        "advantages": torch.randn(8, dtype=D, generator=g),
        "returns": torch.randn(8, dtype=D, generator=g),
    }
    return (lambda: ppo_loss(net, mb, PpoConfig())[0]), list(net.parameters())


GRADIENT_CASES = {"mlp": _mlp_case, "lstm": _lstm_case, "bisim-loss": _bisim_case, "ppo-loss": _ppo_case}


@_timed
def check_gradients(points: int = 50, tol: float = 1e-4) -> PropertyResult:
    failures, worst = [], {}
    for name, case in GRADIENT_CASES.items():
        worst[name] = 0.0
        for i in range(points):
            fn, params = case(i)
            err = gradient_check(fn, params)
            worst[name] = max(worst[name], err)
            if not err < tol:
                failures.append({"case": name, "point": i, "relative_error": err})
    detail = {f"max_err_{k}": f"{v:.1e}" for k, v in worst.items()}
    return PropertyResult("gradient-checks", not failures, points * len(GRADIENT_CASES), failures=failures, detail=detail)


@_timed
def check_gae(sequences: int = 100, length: int = 20, seed: int = 3, tol: float = 1e-12) -> PropertyResult:
    rng = np.random.default_rng(seed)
    failures, worst = [], 0.0
    for i in range(sequences):
        r = rng.normal(size=length)
        v = rng.normal(size=length + 1)
        d = rng.random(length) < 0.1
        gamma, lam = rng.uniform(0.9, 1.0), rng.uniform(0.0, 1.0)
        err = float(np.max(np.abs(gae(r, v, d, gamma, lam) - lambda_return_advantages(r, v, d, gamma, lam))))
        worst = max(worst, err)
        if err > tol:
            failures.append({"sequence": i, "max_abs_error": err})
    return PropertyResult("gae-oracle", not failures, sequences, failures=failures, detail={"max_err": f"{worst:.1e}"})


def run_suite(fault: str | None = None, quick: bool = False) -> list[PropertyResult]:
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; choose from {FAULTS}")
    return [
        check_hierarchical_optimality(fault=fault),
        check_counterexample(),
        check_bisim_partition(),
        check_abstraction_consistency(),
        check_planner(n_windows=100 if quick else 1000),
        check_gradients(points=5 if quick else 50),
        check_gae(),
    ]
