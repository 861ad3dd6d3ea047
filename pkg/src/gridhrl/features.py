"""Observation packing, featurization and decision histories.

Observations are stored compactly as one float32 row per step::

    [cell codes (cells) | agent flat index (1) | inventory (k) | goal (g)]

and expanded on demand to one-hot network inputs. Keeping the raw codes
around lets augmentation shift windows before featurization.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
import torch

from .envs.core import Observation, ObsMode
from .hierarchy import Goal

GOAL_DIM = 3


@dataclass(frozen=True)
class Featurizer:
    shape: tuple[int, int]
    n_codes: int
    inventory_dim: int
    inventory_scale: float = 1.0
    agent_plane: bool = False  # needed for full-map frames, constant for egocentric ones
    goal_features: bool = False

    @property
    def cells(self) -> int:
        return self.shape[0] * self.shape[1]

    @property
    def packed_dim(self) -> int:
        return self.cells + 1 + self.inventory_dim + (GOAL_DIM if self.goal_features else 0)

    @property
    def dim(self) -> int:
        extra = self.inventory_dim + (GOAL_DIM if self.goal_features else 0)
        return self.cells * self.n_codes + (self.cells if self.agent_plane else 0) + extra

    @classmethod
    def for_observation(cls, obs: Observation, n_codes: int, inventory_scale: float = 1.0, goal_features=False):
        return cls(
            shape=obs.shape,
            n_codes=n_codes,
            inventory_dim=len(obs.inventory_features),
            inventory_scale=inventory_scale,
            agent_plane=obs.mode is ObsMode.FULL_MAP,
            goal_features=goal_features,
        )

    def pack(self, obs: Observation) -> np.ndarray:
        row = np.zeros(self.packed_dim, dtype=np.float32)
        row[: self.cells] = obs.window
        row[self.cells] = obs.agent[0] * self.shape[1] + obs.agent[1]
        inv = self.cells + 1
        row[inv : inv + self.inventory_dim] = obs.inventory_features * self.inventory_scale
        return row

    def goal_vector(self, goal_index: int) -> np.ndarray:
        g = Goal.from_index(int(goal_index), self.shape)
        return np.array([g.row / self.shape[0], g.col / self.shape[1], float(g.kind)], dtype=np.float32)

    def set_goal(self, row: np.ndarray, goal_index: int) -> None:
        if self.goal_features:
            row[-GOAL_DIM:] = self.goal_vector(goal_index)

    def codes(self, packed: torch.Tensor) -> torch.Tensor:
        return packed[..., : self.cells]

    def __call__(self, packed) -> torch.Tensor:
        """Expand packed rows ``(..., packed_dim)`` to network inputs ``(..., dim)``."""
        packed = torch.as_tensor(packed)
        codes = packed[..., : self.cells].long()
        parts = [torch.nn.functional.one_hot(codes, self.n_codes).flatten(-2).to(torch.float32)]
        if self.agent_plane:
            agent = packed[..., self.cells].long()
            parts.append(torch.nn.functional.one_hot(agent, self.cells).to(torch.float32))
        parts.append(packed[..., self.cells + 1 :].to(torch.float32))
        return torch.cat(parts, dim=-1)


class History:
    """The last ``length`` packed decision-time observations, oldest first.

    Missing history at episode start is zero-filled and flagged invalid.
    """

    def __init__(self, length: int, packed_dim: int):
        if length < 1:
            raise ValueError("history length must be >= 1")
        self.length = length
        self.packed_dim = packed_dim
        self._rows: deque[np.ndarray] = deque(maxlen=length)

    def reset(self) -> None:
        self._rows.clear()

    def push(self, row: np.ndarray) -> None:
        self._rows.append(np.array(row, dtype=np.float32))

    @property
    def last(self) -> np.ndarray:
        return self._rows[-1]

    def array(self) -> tuple[np.ndarray, np.ndarray]:
        out = np.zeros((self.length, self.packed_dim), dtype=np.float32)
        valid = np.zeros(self.length, dtype=bool)
        n = len(self._rows)
        if n:
            out[self.length - n :] = np.stack(self._rows)
            valid[self.length - n :] = True
        return out, valid
