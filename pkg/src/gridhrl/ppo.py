"""Masked-categorical PPO with generalized advantage estimation.

One trainer serves both the hierarchical agents (action space = goal index,
mask = valid goals) and the flat baseline (five primitive actions, all-true
mask). Only the input features and the action count differ.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .nn import Lstm, LstmSpec, Mlp, MlpSpec


@dataclass
class PpoConfig:
    lr: float = 1e-4
    gamma: float = 0.997
    gae_lambda: float = 0.95
    clip: float = 0.2
    epochs: int = 4
    minibatch: int = 256
    rollout: int = 2048  # decisions per update, summed over parallel envs
    vf_coef: float = 0.5
    ent_coef: float = 0.01
    max_grad_norm: float = 0.5
    normalize_advantages: bool = True
    smdp_discount: bool = False  # discount by gamma**duration instead of one tick per decision


# -- sampling ----------------------------------------------------------------


def masked_log_softmax_np(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Log-probabilities restricted to ``mask``; invalid entries are ``-inf``."""
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("action mask has no valid entry")
    z = np.where(mask, logits, -np.inf)
    z = z - z[mask].max()
    return z - np.log(np.exp(z).sum())


def _draw(logp: np.ndarray, mask: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(np.exp(logp))  # exp(-inf) is exactly 0 where masked
    # side="right" never lands on a zero-width bin
    idx = np.searchsorted(cdf, u * cdf[-1], side="right")
    return np.where(idx >= len(cdf), np.flatnonzero(mask)[-1], idx)


def masked_sample(logits, mask, rng: np.random.Generator) -> tuple[int, float]:
    """Draw one index from the masked softmax; returns (index, log_prob)."""
    mask = np.asarray(mask, dtype=bool)
    logp = masked_log_softmax_np(logits, mask)
    i = int(_draw(logp, mask, np.asarray(rng.random())))
    return i, float(logp[i])


def masked_sample_many(logits, mask, rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` independent draws from the same masked softmax."""
    mask = np.asarray(mask, dtype=bool)
    return _draw(masked_log_softmax_np(logits, mask), mask, rng.random(n))


def masked_argmax(logits, mask) -> int:
    return int(np.argmax(masked_log_softmax_np(logits, mask)))


def masked_log_probs(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return torch.log_softmax(logits.masked_fill(~mask, float("-inf")), dim=-1)


def masked_entropy(logp: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    # zero the -inf entries before multiplying so backward stays finite
    safe = torch.where(mask, logp, torch.zeros_like(logp))
    return -(safe.exp() * safe * mask).sum(dim=-1)


# -- advantages ----------------------------------------------------------------


def gae(rewards, values, dones, gamma, lam: float) -> np.ndarray:
    """Recursive GAE over a single stream.

    ``values`` has one more entry than ``rewards`` (the bootstrap value).
    ``gamma`` may be a scalar or a per-step array (semi-MDP discounting).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    n = len(rewards)
    if len(values) != n + 1 or len(dones) != n:
        raise ValueError(f"length mismatch: {n} rewards, {len(values)} values, {len(dones)} dones")
    gammas = np.broadcast_to(np.asarray(gamma, dtype=np.float64), (n,))
    adv = np.zeros(n)
    running = 0.0
    for t in range(n - 1, -1, -1):
        alive = 1.0 - dones[t]
        delta = rewards[t] + gammas[t] * values[t + 1] * alive - values[t]
        running = delta + gammas[t] * lam * alive * running
        adv[t] = running
    return adv


# -- networks --------------------------------------------------------------------


class ActorCritic(nn.Module):
    """Separate policy and value MLPs over a shared (optional) LSTM encoder.

    Inputs are ``(B, F)`` feature vectors, or ``(B, T, F)`` histories with a
    ``(B, T)`` validity mask when ``recurrent_dim`` is set.
    """

    def __init__(
        self,
        in_dim: int,
        n_actions: int,
        gen: torch.Generator,
        hidden: tuple[int, ...] = (64, 64),
        recurrent_dim: int | None = None,
        dtype=torch.float32,
    ):
        super().__init__()
        self.encoder = Lstm(LstmSpec(in_dim, recurrent_dim), gen, dtype) if recurrent_dim else None
        feat = recurrent_dim or in_dim
        self.pi = Mlp(MlpSpec((feat, *hidden, n_actions)), gen, dtype)
        self.v = Mlp(MlpSpec((feat, *hidden, 1)), gen, dtype)
        with torch.no_grad():
            self.pi.layers[-1].weight.mul_(0.01)  # start close to uniform
        self.n_actions = n_actions

    @property
    def recurrent(self) -> bool:
        return self.encoder is not None

    def forward(self, x: torch.Tensor, valid: torch.Tensor | None = None):
        if self.encoder is not None:
            _, x = self.encoder(x, valid)
        return self.pi(x), self.v(x).squeeze(-1)


# -- rollout storage -------------------------------------------------------------


@dataclass
class Rollout:
    """Decision-level experience for ``n_envs`` lockstep streams, time-major."""

    n_envs: int
    inputs: list = field(default_factory=list)  # per step: (n_envs, ...) arrays
    valid: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    values: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    dones: list = field(default_factory=list)
    durations: list = field(default_factory=list)

    def add(self, inputs, valid, actions, masks, rewards, values, log_probs, dones, durations):
        self.inputs.append(np.asarray(inputs))
        if valid is not None:
            self.valid.append(np.asarray(valid, dtype=bool))
        self.actions.append(np.asarray(actions, dtype=np.int64))
        self.masks.append(np.asarray(masks, dtype=bool))
        self.rewards.append(np.asarray(rewards, dtype=np.float64))
        self.values.append(np.asarray(values, dtype=np.float64))
        self.log_probs.append(np.asarray(log_probs, dtype=np.float64))
        self.dones.append(np.asarray(dones, dtype=bool))
        self.durations.append(np.asarray(durations, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.actions) * self.n_envs

    def finish(self, last_values, cfg: PpoConfig) -> dict[str, torch.Tensor]:
        """Compute advantages/returns per stream and flatten to a training batch."""
        rewards = np.stack(self.rewards)
        values = np.stack(self.values)
        dones = np.stack(self.dones)
        durations = np.stack(self.durations)
        boot = np.concatenate([values, np.asarray(last_values, dtype=np.float64)[None]], axis=0)
        adv = np.zeros_like(rewards)
        for e in range(self.n_envs):
            gam = cfg.gamma ** durations[:, e] if cfg.smdp_discount else cfg.gamma
            adv[:, e] = gae(rewards[:, e], boot[:, e], dones[:, e], gam, cfg.gae_lambda)
        returns = adv + values

        def flat(xs):
            a = np.stack(xs)
            return a.reshape(-1, *a.shape[2:])

        batch = {
            "inputs": torch.from_numpy(flat(self.inputs)),
            "actions": torch.from_numpy(flat(self.actions)),
            "masks": torch.from_numpy(flat(self.masks)),
            "old_log_probs": torch.from_numpy(flat(self.log_probs)),
            "old_values": torch.from_numpy(values.reshape(-1)),
            "advantages": torch.from_numpy(adv.reshape(-1)),
            "returns": torch.from_numpy(returns.reshape(-1)),
        }
        if self.valid:
            batch["valid"] = torch.from_numpy(flat(self.valid))
        return batch


# -- update ----------------------------------------------------------------------


@dataclass
class UpdateStats:
    policy_loss: float = 0.0
    value_loss: float = 0.0
    entropy: float = 0.0
    clip_fraction: float = 0.0
    approx_kl: float = 0.0
    aborted: bool = False
    minibatches: int = 0


def ppo_loss(net: ActorCritic, mb: dict[str, torch.Tensor], cfg: PpoConfig, featurize=None):
    """Clipped-surrogate objective as a loss to minimize, plus diagnostics."""
    x = mb["inputs"] if featurize is None else featurize(mb["inputs"])
    logits, value = net(x, mb.get("valid"))
    logp_all = masked_log_probs(logits, mb["masks"])
    logp = logp_all.gather(-1, mb["actions"][:, None]).squeeze(-1)
    dtype = logp.dtype
    adv = mb["advantages"].to(dtype)
    ratio = torch.exp(logp - mb["old_log_probs"].to(dtype))
    surr = torch.min(ratio * adv, torch.clamp(ratio, 1 - cfg.clip, 1 + cfg.clip) * adv)
    policy_loss = -surr.mean()
    value_loss = (value - mb["returns"].to(dtype)).pow(2).mean()
    entropy = masked_entropy(logp_all, mb["masks"]).mean()
    loss = policy_loss + cfg.vf_coef * value_loss - cfg.ent_coef * entropy
    with torch.no_grad():
        log_ratio = logp - mb["old_log_probs"].to(dtype)
        info = {
            "policy_loss": policy_loss.item(),
            "value_loss": value_loss.item(),
            "entropy": entropy.item(),
            "clip_fraction": ((ratio - 1).abs() > cfg.clip).to(dtype).mean().item(),
            "approx_kl": ((ratio - 1) - log_ratio).mean().item(),
        }
    return loss, info


def ppo_update(
    net: ActorCritic,
    optimizer: torch.optim.Optimizer,
    batch: dict[str, torch.Tensor],
    cfg: PpoConfig,
    gen: torch.Generator,
    featurize=None,
) -> UpdateStats:
    """Run ``cfg.epochs`` passes of shuffled minibatch updates over ``batch``.

    A non-finite loss aborts the remaining update and is reported via
    ``stats.aborted``; parameters are left as they were after the last good step.
    """
    batch = dict(batch)
    if cfg.normalize_advantages and len(batch["advantages"]) > 1:
        a = batch["advantages"]
        batch["advantages"] = (a - a.mean()) / (a.std() + 1e-8)
    n = len(batch["actions"])
    stats = UpdateStats()
    sums: dict[str, float] = {}
    for _ in range(cfg.epochs):
        order = torch.randperm(n, generator=gen)
        for start in range(0, n, cfg.minibatch):
            idx = order[start : start + cfg.minibatch]
            mb = {k: v[idx] for k, v in batch.items()}
            loss, info = ppo_loss(net, mb, cfg, featurize)
            if not math.isfinite(loss.item()):
                stats.aborted = True
                break
            optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(net.parameters(), cfg.max_grad_norm)
            optimizer.step()
            stats.minibatches += 1
            for k, v in info.items():
                sums[k] = sums.get(k, 0.0) + v
        if stats.aborted:
            break
    for k, v in sums.items():
        setattr(stats, k, v / max(stats.minibatches, 1))
    return stats
