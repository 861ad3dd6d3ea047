"""Learned state abstraction trained with a bisimulation-style loss.

An encoder maps a state (dense MLP) or a decision history (LSTM, then a
linear projection) to a latent vector z. Per-goal heads predict the macro
reward and the successor latent. The loss is

    mean[(R(z, g) - r)^2 + lam * ||P(z, g) - sg(z')||^2]

where ``sg`` stops gradients through the successor encoding so the latent
space cannot cheaply collapse.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .envs.core import Cell
from .nn import Lstm, LstmSpec, Mlp, MlpSpec


@dataclass
class AbstractionConfig:
    dim_z: int = 60
    hidden: tuple[int, ...] = (128,)  # dense encoder
    lstm_hidden: int = 64
    head_hidden: tuple[int, ...] = (128,)  # () gives linear heads
    lam: float = 1.0
    batch_size: int = 384
    tf: int = 30  # gradient steps per training call
    lr: float = 1e-4
    capacity: int = 50_000
    augment_prob: float = 0.5


class AbstractionModel(nn.Module):
    def __init__(
        self,
        in_dim: int,
        n_goals: int,
        cfg: AbstractionConfig,
        gen: torch.Generator,
        recurrent: bool = False,
        dtype=torch.float32,
    ):
        super().__init__()
        self.dim_z = cfg.dim_z
        self.n_goals = n_goals
        if recurrent:
            self.lstm = Lstm(LstmSpec(in_dim, cfg.lstm_hidden), gen, dtype)
            self.proj = Mlp(MlpSpec((cfg.lstm_hidden, cfg.dim_z)), gen, dtype)
        else:
            self.lstm = None
            self.proj = Mlp(MlpSpec((in_dim, *cfg.hidden, cfg.dim_z)), gen, dtype)
        self.reward_head = Mlp(MlpSpec((cfg.dim_z, *cfg.head_hidden, n_goals)), gen, dtype)
        self.transition_head = Mlp(MlpSpec((cfg.dim_z, *cfg.head_hidden, n_goals * cfg.dim_z)), gen, dtype)

    @property
    def recurrent(self) -> bool:
        return self.lstm is not None

    def encode(self, x: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
        if self.lstm is not None:
            _, x = self.lstm(x, valid)
        return self.proj(x)

    def predict(self, z: torch.Tensor, goals: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        r = self.reward_head(z).gather(-1, goals[:, None]).squeeze(-1)
        p = self.transition_head(z).view(-1, self.n_goals, self.dim_z)
        p = p[torch.arange(len(goals)), goals]
        return r, p


def bisim_loss(
    model: AbstractionModel,
    x: torch.Tensor,
    goals: torch.Tensor,
    rewards: torch.Tensor,
    x_next: torch.Tensor | None = None,
    lam: float = 1.0,
    valid: torch.Tensor | None = None,
    valid_next: torch.Tensor | None = None,
    z_next: torch.Tensor | None = None,
):
    """Returns (loss, reward term, transition term). Pass ``z_next`` to use a
    fixed successor target instead of encoding ``x_next``."""
    z = model.encode(x, valid)
    if z_next is None:
        with torch.no_grad():
            z_next = model.encode(x_next, valid_next)
    r_hat, p_hat = model.predict(z, goals)
    reward_term = (r_hat - rewards.to(r_hat.dtype)).pow(2).mean()
    transition_term = (p_hat - z_next.detach()).pow(2).sum(-1).mean()
    return reward_term + lam * transition_term, reward_term, transition_term


# -- augmentation ----------------------------------------------------------------

SHIFTS = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)]


def shift_window(grid: np.ndarray, dr: int, dc: int, fill: int = int(Cell.WALL)) -> np.ndarray:
    """Translate the last two axes by (dr, dc); vacated cells get ``fill``."""
    h, w = grid.shape[-2:]
    out = np.full_like(grid, fill)
    src_r = slice(max(0, -dr), h - max(0, dr))
    dst_r = slice(max(0, dr), h - max(0, -dr))
    src_c = slice(max(0, -dc), w - max(0, dc))
    dst_c = slice(max(0, dc), w - max(0, -dc))
    out[..., dst_r, dst_c] = grid[..., src_r, src_c]
    return out


def augment_pair(packed, packed_next, shape, rng: np.random.Generator, prob: float = 0.5):
    """Randomly shift the code windows of each (h, h') pair by the same offset.

    ``packed`` arrays are ``(B, ..., packed_dim)`` with cell codes first.
    Returns copies; non-code columns are untouched.
    """
    packed = np.array(packed)
    packed_next = np.array(packed_next)
    cells = shape[0] * shape[1]
    apply = rng.random(len(packed)) < prob
    which = rng.integers(len(SHIFTS), size=len(packed))
    for k, (dr, dc) in enumerate(SHIFTS):
        sel = np.flatnonzero(apply & (which == k))
        if not len(sel):
            continue
        for arr in (packed, packed_next):
            grid = arr[sel, ..., :cells].reshape(*arr[sel].shape[:-1], *shape)
            arr[sel, ..., :cells] = shift_window(grid, dr, dc).reshape(*grid.shape[:-2], cells)
    return packed, packed_next


# -- replay and training ------------------------------------------------------------


class ReplayBuffer:
    """FIFO ring of (h, valid, g, r, h', valid') tuples with uniform sampling."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.size = 0
        self._next = 0
        self._store: dict[str, np.ndarray] | None = None

    def __len__(self) -> int:
        return self.size

    def add(self, h, valid, goal: int, reward: float, h_next, valid_next) -> None:
        item = {
            "h": np.asarray(h, dtype=np.float32),
            "valid": np.asarray(valid if valid is not None else True, dtype=bool),
            "goal": np.int64(goal),
            "reward": np.float64(reward),
            "h_next": np.asarray(h_next, dtype=np.float32),
            "valid_next": np.asarray(valid_next if valid_next is not None else True, dtype=bool),
        }
        if self._store is None:
            self._store = {k: np.zeros((self.capacity, *np.shape(v)), dtype=np.asarray(v).dtype) for k, v in item.items()}
        for k, v in item.items():
            self._store[k][self._next] = v
        self._next = (self._next + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, n: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        idx = rng.integers(self.size, size=n)
        return {k: v[idx] for k, v in self._store.items()}


@dataclass
class TrainResult:
    skipped: bool
    loss: float = float("nan")
    reward_loss: float = float("nan")
    transition_loss: float = float("nan")
    notice: str = ""


class AbstractionTrainer:
    """Owns the replay buffer and optimizer; ``train()`` runs ``tf`` Adam steps."""

    def __init__(
        self,
        model: AbstractionModel,
        featurize,
        cfg: AbstractionConfig,
        rng: np.random.Generator,
        window_shape: tuple[int, int] | None = None,
    ):
        self.model = model
        self.featurize = featurize
        self.cfg = cfg
        self.rng = rng
        self.window_shape = window_shape  # None disables augmentation
        self.buffer = ReplayBuffer(cfg.capacity)
        self.optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
        self.initial_loss: float | None = None
        self.steps = 0

    def _tensors(self, batch):
        h, h_next = batch["h"], batch["h_next"]
        if self.window_shape is not None and self.cfg.augment_prob > 0:
            h, h_next = augment_pair(h, h_next, self.window_shape, self.rng, self.cfg.augment_prob)
        valid = torch.from_numpy(batch["valid"]) if self.model.recurrent else None
        valid_next = torch.from_numpy(batch["valid_next"]) if self.model.recurrent else None
        return (
            self.featurize(torch.from_numpy(h)),
            torch.from_numpy(batch["goal"]),
            torch.from_numpy(batch["reward"]),
            self.featurize(torch.from_numpy(h_next)),
            valid,
            valid_next,
        )

    def train(self) -> TrainResult:
        if len(self.buffer) < self.cfg.batch_size:
            return TrainResult(True, notice=f"buffer holds {len(self.buffer)} < {self.cfg.batch_size} tuples")
        totals = np.zeros(3)
        for _ in range(self.cfg.tf):
            x, g, r, x_next, v, v_next = self._tensors(self.buffer.sample(self.cfg.batch_size, self.rng))
            loss, rl, tl = bisim_loss(self.model, x, g, r, x_next, self.cfg.lam, v, v_next)
            if self.initial_loss is None:
                self.initial_loss = loss.item()
            self.optimizer.zero_grad()
            loss.backward()
            self.optimizer.step()
            self.steps += 1
            totals += (loss.item(), rl.item(), tl.item())
        totals /= self.cfg.tf
        return TrainResult(False, *totals)
