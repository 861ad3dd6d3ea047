import numpy as np
import pytest
import torch

from gridhrl.abstraction import (
    AbstractionConfig,
    AbstractionModel,
    AbstractionTrainer,
    ReplayBuffer,
    augment_pair,
    bisim_loss,
    shift_window,
)
from gridhrl.envs import Cell, DoorKeyEnv, MultiItemConfig, MultiItemEnv
from gridhrl.envs.core import num_codes
from gridhrl.features import Featurizer, History
from gridhrl.nn import generator
from gridhrl.oracle.gradcheck import gradient_check
from gridhrl.oracle.mdp import CRAFTED_BLOCKS, crafted_bisim_mdp

D = torch.float64


def toy_tables():
    """Three states, two actions: a reward cycle plus a self-loop."""
    succ = np.array([[1, 0], [2, 1], [0, 2]])
    R = np.array([[1.0, 0.0], [0.0, -1.0], [0.5, 0.0]])
    return succ, R


def transitions(succ, R, repeat=1):
    n, m = R.shape
    s, a = np.meshgrid(np.arange(n), np.arange(m), indexing="ij")
    s, a = np.tile(s.ravel(), repeat), np.tile(a.ravel(), repeat)
    eye = np.eye(n)
    return (torch.from_numpy(eye[s]), torch.from_numpy(a), torch.from_numpy(R[s, a]), torch.from_numpy(eye[succ[s, a]]))


def linear_model(n_in, n_goals, dim_z, seed=0, dtype=D):
    cfg = AbstractionConfig(dim_z=dim_z, hidden=(), head_hidden=())
    return AbstractionModel(n_in, n_goals, cfg, generator(seed), dtype=dtype)


def test_zero_networks_give_mean_squared_reward():
    model = linear_model(3, 2, 4)
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    x, a, r, x2 = transitions(*toy_tables())
    loss, _, _ = bisim_loss(model, x, a, r, x2, lam=1.0)
    assert loss.item() == pytest.approx((r**2).mean().item(), abs=1e-15)


def test_lambda_zero_is_reward_mse():
    model = linear_model(3, 2, 4, seed=3)
    x, a, r, x2 = transitions(*toy_tables())
    loss, reward_term, _ = bisim_loss(model, x, a, r, x2, lam=0.0)
    r_hat, _ = model.predict(model.encode(x), a)
    assert loss.item() == reward_term.item() == pytest.approx(((r_hat - r) ** 2).mean().item(), abs=1e-15)


def test_exact_abstraction_has_zero_loss():
    succ, R = toy_tables()
    model = linear_model(3, 2, 3)
    with torch.no_grad():
        model.proj.layers[0].weight.copy_(torch.eye(3, dtype=D))
        model.reward_head.layers[0].weight.copy_(torch.from_numpy(R.T))
        w = torch.zeros(2 * 3, 3, dtype=D)
        for s in range(3):
            for a in range(2):
                w[a * 3 + succ[s, a], s] = 1.0
        model.transition_head.layers[0].weight.copy_(w)
    loss, _, _ = bisim_loss(model, *transitions(succ, R), lam=1.0)
    assert loss.item() == 0.0


def test_bisim_loss_gradient_check():
    cfg = AbstractionConfig(dim_z=4, hidden=(6,), head_hidden=(5,))
    model = AbstractionModel(3, 2, cfg, generator(1), dtype=D)
    x, a, r, x2 = transitions(*toy_tables())
    with torch.no_grad():
        target = model.encode(x2)
    # with the successor target frozen, the stop-gradient loss is an ordinary function
    err = gradient_check(lambda: bisim_loss(model, x, a, r, lam=0.7, z_next=target)[0], list(model.parameters()))
    assert err < 1e-4


def test_recurrent_encoder_padding_and_zero_params():
    cfg = AbstractionConfig(dim_z=5, lstm_hidden=6)
    model = AbstractionModel(4, 3, cfg, generator(2), recurrent=True, dtype=D)
    real = torch.randn(1, 3, 4, dtype=D)
    a = torch.cat([torch.zeros(1, 2, 4, dtype=D), real], 1)
    b = torch.cat([torch.randn(1, 2, 4, dtype=D), real], 1)
    valid = torch.tensor([[False, False, True, True, True]])
    assert torch.equal(model.encode(a, valid), model.encode(b, valid))
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    assert torch.equal(model.encode(b, valid), torch.zeros(1, 5, dtype=D))


def test_encoding_is_reproducible():
    cfg = AbstractionConfig(dim_z=5, lstm_hidden=6)
    x = torch.randn(2, 4, 3)
    z1 = AbstractionModel(3, 2, cfg, generator(9), recurrent=True).encode(x)
    z2 = AbstractionModel(3, 2, cfg, generator(9), recurrent=True).encode(x)
    assert torch.equal(z1, z2)


def test_shift_identity_and_non_idempotence():
    g = np.arange(25, dtype=np.int16).reshape(5, 5)
    assert np.array_equal(shift_window(g, 0, 0), g)
    once = shift_window(g, 1, 0)
    twice = shift_window(once, 1, 0)
    assert not np.array_equal(once, twice)
    assert np.all(once[0] == Cell.WALL) and np.array_equal(once[1:], g[:-1])
    assert np.all(twice[:2] == Cell.WALL)


def test_augment_shares_shift_and_keeps_other_columns():
    rng = np.random.default_rng(0)
    shape = (5, 5)
    h = np.concatenate([rng.integers(0, 8, size=(64, 3, 25)), rng.normal(size=(64, 3, 2))], -1).astype(np.float32)
    h2 = h.copy()
    a, b = augment_pair(h, h2, shape, np.random.default_rng(1), prob=0.5)
    assert np.array_equal(a, b)  # identical inputs stay identical: same shift on both
    assert np.array_equal(a[..., 25:], h[..., 25:])
    changed = np.any(a != h, axis=(1, 2)).mean()
    assert 0.3 < changed < 0.7


def test_augment_leaves_rewards_alone():
    buf = ReplayBuffer(10)
    for i in range(10):
        buf.add(np.zeros((2, 27)), np.ones(2, bool), i % 3, float(i), np.zeros((2, 27)), np.ones(2, bool))
    batch = buf.sample(8, np.random.default_rng(0))
    rewards = batch["reward"].copy()
    augment_pair(batch["h"], batch["h_next"], (5, 5), np.random.default_rng(0), prob=1.0)
    assert np.array_equal(batch["reward"], rewards)


def test_replay_is_fifo():
    buf = ReplayBuffer(3)
    for i in range(5):
        buf.add(np.full(2, i), None, 0, float(i), np.zeros(2), None)
    assert len(buf) == 3
    stored = sorted(buf.sample(200, np.random.default_rng(0))["reward"].tolist())
    assert set(stored) == {2.0, 3.0, 4.0}


def _toy_trainer(succ, R, seed=0, lr=1e-2, steps=1):
    n = R.shape[0]
    cfg = AbstractionConfig(dim_z=4, hidden=(16,), head_hidden=(16,), batch_size=32, tf=steps, lr=lr)
    model = AbstractionModel(n, R.shape[1], cfg, generator(seed))
    trainer = AbstractionTrainer(model, lambda x: x.float(), cfg, np.random.default_rng(seed))
    eye = np.eye(n, dtype=np.float32)
    for _ in range(20):
        for s in range(n):
            for a in range(R.shape[1]):
                trainer.buffer.add(eye[s], None, a, R[s, a], eye[succ[s, a]], None)
    return trainer


def test_small_buffer_skips_with_notice():
    cfg = AbstractionConfig(dim_z=4, batch_size=384)
    model = AbstractionModel(3, 2, cfg, generator(0))
    trainer = AbstractionTrainer(model, lambda x: x, cfg, np.random.default_rng(0))
    trainer.buffer.add(np.zeros(3), None, 0, 1.0, np.zeros(3), None)
    before = [p.detach().clone() for p in model.parameters()]
    res = trainer.train()
    assert res.skipped and "384" in res.notice
    assert all(torch.equal(a, b) for a, b in zip(before, model.parameters()))


def test_training_is_deterministic():
    succ, R = toy_tables()
    a = _toy_trainer(succ, R, steps=10)
    b = _toy_trainer(succ, R, steps=10)
    a.train(), b.train()
    for pa, pb in zip(a.model.parameters(), b.model.parameters()):
        assert torch.equal(pa, pb)


def test_toy_mdp_loss_drops_below_one_percent():
    succ, R = toy_tables()
    trainer = _toy_trainer(succ, R, steps=500)
    res = trainer.train()
    x, a, r, x2 = transitions(succ, R)
    final, _, _ = bisim_loss(trainer.model, x.float(), a, r, x2.float())
    assert final.item() < 0.01 * trainer.initial_loss, (final.item(), trainer.initial_loss, res)


def crafted_successors():
    mdp = crafted_bisim_mdp()
    return np.argmax(mdp.P, axis=2), mdp.R


def test_converged_abstraction_respects_bisimulation():
    succ, R = crafted_successors()
    trainer = _toy_trainer(succ, R, steps=1500)
    trainer.train()
    model = trainer.model
    with torch.no_grad():
        z = model.encode(torch.eye(6))
        r_hat = model.reward_head(z)
        p_hat = model.transition_head(z).view(6, 2, -1)
    for block in CRAFTED_BLOCKS:
        s1, s2 = sorted(block)
        assert torch.max(torch.abs(r_hat[s1] - r_hat[s2])) < 0.05
        assert torch.max(torch.linalg.norm(p_hat[s1] - p_hat[s2], dim=-1)) < 0.05


def test_featurizer_shapes_and_history_padding():
    env = DoorKeyEnv()
    obs = env.reset(0)
    f = Featurizer.for_observation(obs, num_codes())
    row = f.pack(obs)
    assert row.shape == (f.packed_dim,) and f(row).shape == (f.dim,)
    assert f(row)[: f.cells * f.n_codes].sum() == f.cells  # one-hot per cell
    hist = History(4, f.packed_dim)
    hist.push(row)
    arr, valid = hist.array()
    assert valid.tolist() == [False, False, False, True]
    assert np.array_equal(arr[-1], row) and not arr[:3].any()
    for _ in range(6):
        hist.push(row)
    assert hist.array()[1].all()


def test_full_map_featurizer_marks_agent():
    env = MultiItemEnv(MultiItemConfig(grid_size=6, num_item_types=2))
    obs = env.reset(3)
    f = Featurizer.for_observation(obs, num_codes(2), goal_features=True)
    x = f(f.pack(obs))
    plane = x[f.cells * f.n_codes : f.cells * f.n_codes + f.cells]
    r, c = obs.agent
    assert plane.sum() == 1 and plane[r * 6 + c] == 1
    row = f.pack(obs)
    f.set_goal(row, 2 * 36 - 1)
    assert np.array_equal(row[-3:], np.float32([5 / 6, 5 / 6, 1.0]))
