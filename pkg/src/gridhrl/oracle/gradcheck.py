"""Central finite differences against autograd."""

from __future__ import annotations

from typing import Callable, Sequence

import torch


def finite_difference_grads(
    loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], h: float = 1e-5
) -> list[torch.Tensor]:
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = loss_fn().item()
                flat[i] = old - h
                down = loss_fn().item()
                flat[i] = old
                gflat[i] = (up - down) / (2 * h)
            grads.append(g)
    return grads


def analytic_grads(loss_fn, params) -> list[torch.Tensor]:
    loss = loss_fn()
    return [g if g is not None else torch.zeros_like(p)
            for g, p in zip(torch.autograd.grad(loss, list(params), allow_unused=True), params)]


def relative_error(a: Sequence[torch.Tensor], b: Sequence[torch.Tensor]) -> float:
    va = torch.cat([x.reshape(-1) for x in a])
    vb = torch.cat([x.reshape(-1) for x in b])
    denom = max(va.norm().item(), vb.norm().item(), 1e-12)
    return (va - vb).norm().item() / denom


def gradient_check(loss_fn, params, h: float = 1e-5) -> float:
    """Relative error between autograd and central differences (float64 params expected)."""
    params = list(params)
    return relative_error(analytic_grads(loss_fn, params), finite_difference_grads(loss_fn, params, h))
