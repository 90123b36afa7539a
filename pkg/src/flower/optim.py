"""Adam updates, finite-difference gradient checks and parameter digests."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor


@dataclass(frozen=True)
class AdamHyper:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamSlots:
    m: list[Tensor]
    v: list[Tensor]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "AdamSlots":
        return cls(m=[torch.zeros_like(p) for p in params], v=[torch.zeros_like(p) for p in params])


def adam_update(
    params: Sequence[Tensor],
    grads: Sequence[Tensor],
    slots: AdamSlots,
    lr: float,
    hyper: AdamHyper = AdamHyper(),
) -> Sequence[Tensor]:
    """One bias-corrected Adam step, applied in place; returns ``params``."""
    if len(params) != len(grads) or len(params) != len(slots.m):
        raise ValueError("params, grads and optimizer slots must line up")
    slots.step += 1
    t = slots.step
    c1 = 1.0 - hyper.beta1 ** t
    c2 = 1.0 - hyper.beta2 ** t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, slots.m, slots.v):
            m.mul_(hyper.beta1).add_(g, alpha=1.0 - hyper.beta1)
            v.mul_(hyper.beta2).addcmul_(g, g, value=1.0 - hyper.beta2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + hyper.eps))
    return params


def gradient_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    grads: Sequence[Tensor] | None = None,
    floor: float = 1e-6,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn`` must recompute the loss from the current values of ``params``.
    With ``max_coords`` set, that many coordinates are sampled per tensor.
    Denominators are ``max(|analytic|, |numeric|, floor)`` so coordinates with
    vanishing gradient are judged on absolute error.
    """
    params = list(params)
    for p in params:
        if p.is_leaf and not p.requires_grad:
            p.requires_grad_(True)
    if grads is None:
        loss = loss_fn()
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat = p.view(-1)
            gflat = g.reshape(-1)
            n = flat.numel()
            idx = np.arange(n) if max_coords is None or max_coords >= n else rng.choice(n, size=max_coords, replace=False)
            for k in idx:
                orig = flat[k].item()
                flat[k] = orig + eps
                up = float(loss_fn())
                flat[k] = orig - eps
                down = float(loss_fn())
                flat[k] = orig
                numeric = (up - down) / (2 * eps)
                analytic = float(gflat[k])
                err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
                worst = max(worst, err)
    return worst


def param_digest(params: Sequence[Tensor]) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().to(torch.float64).contiguous().numpy().astype("<f8").tobytes())
    return h.hexdigest()
