"""CLUB mutual-information upper bound and the redundancy loss built on it.

The likelihood provider is anything with ``log_prob(x, omega)`` returning
total nats per broadcast element and an ``event_dims`` attribute; the flow
satisfies this, and so does :class:`GaussianConditional`, the exact
conditional of a correlated Gaussian used to validate the estimator.
Every likelihood is divided by ``event_dims`` before it enters the bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Protocol

import numpy as np
import torch
from torch import Tensor

from .errors import DomainError, ShapeError, ValidationError

Mode = Literal["all_pairs", "derangement"]
MODES = ("all_pairs", "derangement")
ALL_PAIRS_MAX_BATCH = 64


class ConditionalDensity(Protocol):
    event_dims: int

    def log_prob(self, x: Tensor, omega: Tensor) -> Tensor: ...


@dataclass(frozen=True)
class MIEstimate:
    value: float
    positive_term: float
    negative_term: float
    batch_size: int
    mode: str
    stderr: float

    def as_record(self) -> dict:
        return {
            "value": self.value,
            "positive_term": self.positive_term,
            "negative_term": self.negative_term,
            "batch_size": self.batch_size,
            "mode": self.mode,
            "stderr": self.stderr,
        }


def resolve_mode(mode: str, batch_size: int) -> str:
    if mode == "auto":
        return "all_pairs" if batch_size <= ALL_PAIRS_MAX_BATCH else "derangement"
    if mode not in MODES:
        raise ValidationError(f"unknown negative-sampling mode {mode!r}")
    return mode


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random permutation without fixed points (rejection sampling)."""
    if n < 2:
        raise DomainError("a derangement needs at least two elements")
    idx = np.arange(n)
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == idx):
            return perm


def _row_offsets(model, xs: Tensor, omegas: Tensor, paired: Tensor, chunk: int) -> Tensor:
    """``(1/B) sum_j log p(x_i | omega_j) - log p(x_i | omega_i)`` for every i.

    Centring on the paired term keeps the estimate exactly zero when the
    likelihood ignores omega. Chunks are reduced in a fixed order.
    """
    fast = getattr(model, "mean_log_prob_over", None)
    if fast is not None:
        return fast(xs, omegas) - paired
    B = xs.shape[0]
    om = omegas.unsqueeze(0)
    rows = []
    for start in range(0, B, chunk):
        xb = xs[start : start + chunk]
        grid = model.log_prob(xb.unsqueeze(1), om)  # (chunk, B)
        rows.append((grid - paired[start : start + chunk].unsqueeze(1)).mean(dim=1))
    return torch.cat(rows)


def club_terms(
    xs: Tensor,
    omegas: Tensor,
    model: ConditionalDensity,
    mode: str = "auto",
    rng: np.random.Generator | None = None,
    chunk: int | None = None,
) -> tuple[Tensor, Tensor, Tensor, str]:
    """Per-dimension ``(positive, negative, per-sample differences, mode)`` as tensors."""
    B = xs.shape[0]
    if B < 2:
        raise DomainError("CLUB needs a batch of at least two pairs")
    if omegas.shape[0] != B:
        raise ShapeError(f"{B} inputs but {omegas.shape[0]} embeddings")
    mode = resolve_mode(mode, B)
    dims = model.event_dims
    paired = model.log_prob(xs, omegas)
    if mode == "all_pairs":
        if chunk is None:
            chunk = max(1, 4096 // B)
        diffs = -_row_offsets(model, xs, omegas, paired, chunk) / dims
    else:
        if rng is None:
            rng = np.random.default_rng(0)
        perm = torch.from_numpy(derangement(B, rng))
        diffs = (paired - model.log_prob(xs, omegas[perm])) / dims
    paired = paired / dims
    return paired.mean(), (paired - diffs).mean(), diffs, mode


def club_estimate(xs, omegas, model, mode: str = "auto", rng=None, chunk=None) -> MIEstimate:
    pos, neg, diffs, mode = club_terms(xs, omegas, model, mode, rng, chunk)
    B = diffs.shape[0]
    d = diffs.detach()
    stderr = float(d.std(unbiased=True) / math.sqrt(B))
    pos_f, neg_f = float(pos.detach()), float(neg.detach())
    return MIEstimate(
        value=float((pos - neg).detach()),
        positive_term=pos_f,
        negative_term=neg_f,
        batch_size=B,
        mode=mode,
        stderr=stderr,
    )


def redundancy_loss(xs, omegas, model, mode: str = "auto", rng=None, chunk=None) -> Tensor:
    """Differentiable CLUB value; minimised w.r.t. the embeddings with the flow frozen."""
    pos, neg, _, _ = club_terms(xs, omegas, model, mode, rng, chunk)
    return pos - neg


def gaussian_mi_oracle(rho: float, dims: int = 1) -> float:
    if not abs(rho) < 1:
        raise DomainError("correlation must lie strictly inside (-1, 1)")
    if dims < 1:
        raise ValidationError("dims must be >= 1")
    return dims * (-0.5 * math.log1p(-rho * rho))


class GaussianConditional:
    """Exact ``p(x | omega)`` for unit-variance pairs with correlation ``rho``.

    ``x`` and ``omega`` have shape ``(..., dims)``; given ``omega`` each
    coordinate of ``x`` is ``N(rho * omega, 1 - rho^2)``.
    """

    def __init__(self, rho: float, dims: int = 1):
        if not abs(rho) < 1:
            raise DomainError("correlation must lie strictly inside (-1, 1)")
        self.rho = float(rho)
        self.event_dims = int(dims)
        self._var = 1.0 - self.rho * self.rho

    def log_prob(self, x: Tensor, omega: Tensor) -> Tensor:
        resid = x - self.rho * omega
        return (-0.5 * math.log(2 * math.pi * self._var) - resid * resid / (2 * self._var)).sum(dim=-1)

    def mean_log_prob_over(self, xs: Tensor, omegas: Tensor) -> Tensor:
        """Row means of the full pair grid, via the omega moments (the quadratic factorises)."""
        m1 = omegas.mean(dim=0)
        m2 = (omegas * omegas).mean(dim=0)
        sq = xs * xs - 2 * self.rho * xs * m1 + self.rho * self.rho * m2
        return (-0.5 * math.log(2 * math.pi * self._var) - sq / (2 * self._var)).sum(dim=-1)

    def sample(self, n: int, rng: np.random.Generator) -> tuple[Tensor, Tensor]:
        """``n`` joint draws ``(x, omega)``."""
        omega = rng.standard_normal((n, self.event_dims))
        x = self.rho * omega + math.sqrt(self._var) * rng.standard_normal((n, self.event_dims))
        return torch.from_numpy(x), torch.from_numpy(omega)
