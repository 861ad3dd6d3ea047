"""Advantage oracle built from explicit n-step returns.

The GAE advantage equals the lambda-weighted mixture of n-step returns minus
the baseline. Computing every n-step return directly gives an independent
reference for the recursive implementation.
"""

from __future__ import annotations

import numpy as np


def n_step_return(rewards, values, dones, gamma: float, t: int, n: int) -> float:
    """Discounted sum of ``n`` rewards from ``t`` plus the bootstrap value,
    cut at the first terminal (no bootstrap past a done)."""
    total, disc = 0.0, 1.0
    for k in range(n):
        total += disc * rewards[t + k]
        if dones[t + k]:
            return total
        disc *= gamma
    return total + disc * values[t + n]


def lambda_return_advantages(rewards, values, dones, gamma: float, lam: float) -> np.ndarray:
    """A_t = sum_{n<N} (1-lam) lam^(n-1) G^(n) + lam^(N-1) G^(N) - V_t, with N = T - t."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    T = len(rewards)
    out = np.zeros(T)
    for t in range(T):
        N = T - t
        g = sum((1 - lam) * lam ** (n - 1) * n_step_return(rewards, values, dones, gamma, t, n) for n in range(1, N))
        g += lam ** (N - 1) * n_step_return(rewards, values, dones, gamma, t, N)
        out[t] = g - values[t]
    return out
