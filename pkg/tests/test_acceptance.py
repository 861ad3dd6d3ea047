"""Acceptance suite: one recorded criterion per test, each at its stated tolerance.

The desk-scale training runs are shared through session fixtures, so the
ordering and abstraction criteria reuse the same logs.
"""

import filecmp
import inspect
import time

import numpy as np
import pytest

import test_rewards
from gridhrl.config import preset
from gridhrl.train import train_run
from gridhrl.verify import (
    check_abstraction_consistency,
    check_hierarchical_optimality,
    check_bisim_partition,
    check_counterexample,
    check_gae,
    check_gradients,
    check_planner,
)

DOORKEY_SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    """Lazily trained desk-scale runs keyed by (preset, method, seed)."""
    cache = {}
    root = tmp_path_factory.mktemp("acceptance")

    def get(name, method, seed=0):
        key = (name, method, seed)
        if key not in cache:
            cfg = preset(name).replace(method=method)
            t = time.perf_counter()
            res = train_run(cfg, seed, root / f"{name}-{method}-{seed}")
            cache[key] = (res, time.perf_counter() - t)
        return cache[key]

    return get


def test_reward_table(criterion):
    with criterion("reward-table conformance") as c:
        cases = [f for n, f in inspect.getmembers(test_rewards, inspect.isfunction) if n.startswith("test_")]
        start = time.perf_counter()
        for case in cases:
            case()
        elapsed = time.perf_counter() - start
        c.detail = f"{len(cases)} reward cases in {elapsed:.3f}s"
        assert elapsed < 1.0


def test_hierarchical_optimality_oracle(criterion):
    with criterion("hierarchical optimality oracle") as c:
        eq, counter = check_hierarchical_optimality(n_worlds=20), check_counterexample()
        c.detail = f"{eq.checked} worlds max gap {eq.detail['max_gap']:.1e}; counterexample flat {counter.detail['flat']} vs hierarchical {counter.detail['hierarchical']}"
        assert eq.passed and eq.detail["max_gap"] <= 1e-9
        assert counter.passed
        assert eq.seconds + counter.seconds < 120


def test_bisimulation_oracle(criterion):
    with criterion("bisimulation oracle") as c:
        part, cons = check_bisim_partition(), check_abstraction_consistency(tol=0.05)
        c.detail = f"{part.detail['blocks']} blocks; reward gap {cons.detail['max_reward_gap']}, transition gap {cons.detail['max_transition_gap']}"
        assert part.passed and cons.passed
        assert part.seconds + cons.seconds < 300


def test_planner_optimality(criterion):
    with criterion("planner optimality") as c:
        res = check_planner(n_windows=1000)
        c.detail = f"{res.checked} windows, {res.detail['goals']} goals, {res.seconds:.1f}s"
        assert res.passed, res.failures[:3]
        assert res.seconds < 60


def test_gradient_checks(criterion):
    with criterion("gradient checks") as c:
        res = check_gradients(points=50, tol=1e-4)
        c.detail = " ".join(f"{k}={v}" for k, v in res.detail.items())
        assert res.passed, res.failures[:3]


def test_gae_oracle(criterion):
    with criterion("GAE oracle") as c:
        res = check_gae(sequences=100, length=20, tol=1e-12)
        c.detail = f"max error {res.detail['max_err']}"
        assert res.passed


def test_doorkey_exploration_ordering(criterion, runs):
    with criterion("desk-scale exploration ordering (doorkey8)") as c:
        hier = [runs("doorkey8", "dchrl", s) for s in DOORKEY_SEEDS]
        flat = [runs("doorkey8", "ppo", s) for s in DOORKEY_SEEDS]
        seconds = sum(t for _, t in hier + flat)
        reached = [max(e["score_mean"] for e in r.evals) >= 1.0 for r, _ in hier]
        # flat PPO: eval score averaged over seeds at each evaluation point
        flat_curve = np.mean([[e["score_mean"] for e in r.evals] for r, _ in flat], axis=0)
        c.detail = (
            f"DcHRL best evals {[round(max(e['score_mean'] for e in r.evals), 3) for r, _ in hier]}; "
            f"PPO seed-mean eval max {flat_curve.max():.3f}; {seconds / 60:.1f} min"
        )
        assert sum(reached) >= 2
        assert np.all(flat_curve <= 0.1)
        assert seconds <= 30 * 60


def test_multiitem_ordering(criterion, runs):
    with criterion("same-direction ordering (multiitem8)") as c:
        hier, _ = runs("multiitem8", "dchrl")
        flat, _ = runs("multiitem8", "ppo")
        h, f = hier.summary["converged_score"], flat.summary["converged_score"]
        c.detail = f"DcHRL {h:.2f}, PPO {f:.2f}"
        assert h > 0 and f < 0


def test_abstraction_sanity(criterion, runs):
    with criterion("DcHRL-SA sanity (multiitem8)") as c:
        sa, _ = runs("multiitem8", "dchrl-sa")
        hier, _ = runs("multiitem8", "dchrl")
        first, last = sa.summary["bisim_initial_loss"], sa.summary["bisim_final_loss"]
        s, h = sa.summary["converged_score"], hier.summary["converged_score"]
        c.detail = f"bisim loss {first:.4g} -> {last:.4g} ({first / last:.1f}x); DcHRL-SA {s:.2f} vs DcHRL {h:.2f}"
        assert first / last >= 10
        assert s >= h - 0.2 * abs(h)


def test_determinism(criterion, tmp_path):
    with criterion("determinism") as c:
        configs = [
            preset("doorkey8").replace(method="dchrl-sa", budget=20_000, eval_every=5_000),
            preset("multiitem8").replace(method="ppo", budget=10_000, eval_every=5_000),
            preset("doorkey8").replace(method="ppo", budget=10_000, eval_every=5_000),
        ]
        compared = 0
        for i, cfg in enumerate(configs):
            train_run(cfg, 7, tmp_path / f"{i}a")
            train_run(cfg, 7, tmp_path / f"{i}b")
            for name in ("updates.csv", "episodes.csv", "eval.csv", "checkpoint.bin"):
                assert filecmp.cmp(tmp_path / f"{i}a" / name, tmp_path / f"{i}b" / name, shallow=False), (cfg.method, name)
                compared += 1
        c.detail = f"{compared} artifacts bit-identical across repeated runs"
