"""Discriminative heads and the discrete mutual-information oracles.

``aam_loss`` and ``ocs_loss`` are the cross-entropy style objectives the
embedding network is trained with. ``negce_lower_bound`` evaluates the
negative cross-entropy of an arbitrary positive scorer on a discrete joint,
which can never exceed ``exact_discrete_mi`` of that joint.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import DomainError, ShapeError, ValidationError


def _normalize(x: Tensor, what: str) -> Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise DomainError(f"cannot length-normalise a zero {what}")
    return x / norms


def cosine_logits(embeddings: Tensor, weights: Tensor) -> Tensor:
    """Cosine similarity of every embedding (rows) with every class weight row."""
    if embeddings.shape[-1] != weights.shape[-1]:
        raise ShapeError(f"embedding width {embeddings.shape[-1]} != weight width {weights.shape[-1]}")
    return _normalize(embeddings, "embedding") @ _normalize(weights, "class weight").T


def aam_loss(embeddings: Tensor, labels: Tensor, weights: Tensor, scale: float = 30.0, margin: float = 0.2) -> Tensor:
    """Additive angular margin softmax, averaged over the batch.

    The target logit is ``s * cos(theta + m)``; the non-target logits stay at
    ``s * cos(theta)``.
    """
    if embeddings.dim() != 2 or embeddings.shape[0] == 0:
        raise ShapeError("embeddings must be a non-empty (B, D) batch")
    c = weights.shape[0]
    if labels.shape != (embeddings.shape[0],) or bool(((labels < 0) | (labels >= c)).any()):
        raise ValidationError(f"labels must be a (B,) tensor of class indices in [0, {c})")
    cosine = cosine_logits(embeddings, weights)
    sine = torch.sqrt((1.0 - cosine * cosine).clamp(0.0, 1.0))
    phi = cosine * math.cos(margin) - sine * math.sin(margin)
    one_hot = F.one_hot(labels, c).to(cosine.dtype)
    logits = scale * (one_hot * phi + (1.0 - one_hot) * cosine)
    return F.cross_entropy(logits, labels)


def ocs_loss(embeddings: Tensor, labels: Tensor, target_weight: Tensor, k: float = 20.0, m0: float = 0.9, m1: float = 0.2) -> Tensor:
    """One-class softmax: ``mean softplus(k (m_y - cos) (-1)^y)``; label 0 is the target class."""
    if embeddings.dim() != 2 or embeddings.shape[0] == 0:
        raise ShapeError("embeddings must be a non-empty (B, D) batch")
    if labels.shape != (embeddings.shape[0],) or bool(((labels != 0) & (labels != 1)).any()):
        raise ValidationError("one-class softmax labels must be 0 or 1")
    cos = (_normalize(embeddings, "embedding") @ _normalize(target_weight, "target weight"))
    margins = torch.where(labels == 0, torch.as_tensor(m0, dtype=cos.dtype), torch.as_tensor(m1, dtype=cos.dtype))
    sign = 1.0 - 2.0 * labels.to(cos.dtype)
    return F.softplus(k * (margins - cos) * sign).mean()


class AAMHead(nn.Module):
    def __init__(self, num_classes: int, embed_dim: int, scale: float = 30.0, margin: float = 0.2):
        super().__init__()
        if num_classes < 2:
            raise ValidationError("AAM head needs at least two classes")
        if scale <= 0 or margin < 0:
            raise ValidationError("AAM scale must be positive and margin non-negative")
        self.weight = nn.Parameter(torch.empty(num_classes, embed_dim))
        self.scale = scale
        self.margin = margin

    def reset_parameters(self, generator: torch.Generator) -> None:
        with torch.no_grad():
            self.weight.copy_(torch.randn(self.weight.shape, generator=generator, dtype=self.weight.dtype))

    def forward(self, embeddings: Tensor, labels: Tensor) -> Tensor:
        return aam_loss(embeddings, labels, self.weight, self.scale, self.margin)

    def predict(self, embeddings: Tensor) -> Tensor:
        return cosine_logits(embeddings, self.weight).argmax(dim=-1)


class OCSHead(nn.Module):
    def __init__(self, embed_dim: int, k: float = 20.0, m0: float = 0.9, m1: float = 0.2):
        super().__init__()
        if not (-1 <= m1 < m0 <= 1):
            raise ValidationError("one-class margins need -1 <= m1 < m0 <= 1")
        if k <= 0:
            raise ValidationError("one-class scale k must be positive")
        self.weight = nn.Parameter(torch.empty(embed_dim))
        self.k, self.m0, self.m1 = k, m0, m1

    def reset_parameters(self, generator: torch.Generator) -> None:
        with torch.no_grad():
            self.weight.copy_(torch.randn(self.weight.shape, generator=generator, dtype=self.weight.dtype))

    def forward(self, embeddings: Tensor, labels: Tensor) -> Tensor:
        return ocs_loss(embeddings, labels, self.weight, self.k, self.m0, self.m1)

    def predict(self, embeddings: Tensor) -> Tensor:
        cos = _normalize(embeddings, "embedding") @ _normalize(self.weight, "target weight")
        return (cos < 0.5 * (self.m0 + self.m1)).long()


# --- discrete oracles -----------------------------------------------------


def validate_joint(joint: np.ndarray) -> np.ndarray:
    joint = np.asarray(joint, dtype=np.float64)
    if joint.ndim != 2 or joint.size == 0:
        raise ValidationError("joint must be a non-empty 2-D table")
    if np.any(joint < 0) or not np.all(np.isfinite(joint)):
        raise ValidationError("joint entries must be finite and non-negative")
    if abs(joint.sum() - 1.0) > 1e-12:
        raise ValidationError(f"joint must sum to 1 (got {joint.sum()!r})")
    return joint


def exact_discrete_mi(joint: np.ndarray) -> float:
    """I(omega; y) in nats for a table indexed ``[omega_symbol, y_symbol]``."""
    joint = validate_joint(joint)
    p_w = joint.sum(axis=1)
    p_y = joint.sum(axis=0)
    total = 0.0
    for i in range(joint.shape[0]):
        for j in range(joint.shape[1]):
            p = joint[i, j]
            if p > 0:
                total += p * math.log(p / (p_w[i] * p_y[j]))
    return total


def negce_lower_bound(joint: np.ndarray, g: np.ndarray | Callable[[int, int], float]) -> float:
    """``E_p(omega, y)[log g(omega, y) / sum_j g(omega, j)]`` by enumeration.

    ``g`` is either a positive table shaped like ``joint`` or a callable on
    ``(omega_symbol, y_symbol)``.
    """
    joint = validate_joint(joint)
    W, N = joint.shape
    if callable(g):
        table = np.array([[g(i, j) for j in range(N)] for i in range(W)], dtype=np.float64)
    else:
        table = np.asarray(g, dtype=np.float64)
    if table.shape != joint.shape:
        raise ShapeError(f"scorer table {table.shape} does not match joint {joint.shape}")
    if np.any(~(table > 0)) or not np.all(np.isfinite(table)):
        raise DomainError("scorer g must be finite and strictly positive")
    total = 0.0
    for i in range(W):
        log_norm = math.log(table[i].sum())
        for j in range(N):
            if joint[i, j] > 0:
                total += joint[i, j] * (math.log(table[i, j]) - log_norm)
    return total
