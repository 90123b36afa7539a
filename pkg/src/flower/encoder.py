"""Frame encoder, self-attentive pooling and the embedding projection.

The functional ops take explicit parameter tensors so tests can drive them
with hand-picked values; :class:`EmbeddingNetwork` owns the trainable
tensors and chains the ops.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .errors import DomainError, ShapeError

ACTIVATIONS = {
    "tanh": torch.tanh,
    "relu": torch.relu,
    "identity": lambda h: h,
}

# (weight H_out x H_in, bias H_out, nonlinearity tag)
FrameLayer = tuple[Tensor, Tensor, str]


def encode_frames(frames: Tensor, layers: Sequence[FrameLayer]) -> Tensor:
    """Apply the shared per-frame map to ``frames`` of shape ``(..., T, F)``."""
    if frames.dim() < 2 or frames.shape[-2] < 1:
        raise ShapeError(f"frames must be (..., T>=1, F), got {tuple(frames.shape)}")
    h = frames
    for i, (weight, bias, tag) in enumerate(layers):
        if weight.dim() != 2 or weight.shape[1] != h.shape[-1] or bias.shape != (weight.shape[0],):
            raise ShapeError(
                f"frame layer {i}: weight {tuple(weight.shape)} / bias {tuple(bias.shape)} "
                f"incompatible with input width {h.shape[-1]}"
            )
        try:
            act = ACTIVATIONS[tag]
        except KeyError:
            raise ValueError(f"unknown nonlinearity {tag!r}") from None
        h = act(h @ weight.T + bias)
    return h


def attention_scores(hidden: Tensor, weight: Tensor, bias: Tensor, v: Tensor) -> Tensor:
    """``e_t = v^T tanh(W h_t + b)`` with one ``(v, W, b)`` shared over frames."""
    H = hidden.shape[-1]
    if weight.shape != (H, H) or bias.shape != (H,) or v.shape != (H,):
        raise ShapeError(
            f"attention params W{tuple(weight.shape)} b{tuple(bias.shape)} v{tuple(v.shape)} "
            f"do not match hidden width {H}"
        )
    return torch.tanh(hidden @ weight.T + bias) @ v


def attention_weights(scores: Tensor) -> Tensor:
    if scores.shape[-1] < 1:
        raise DomainError("attentive pooling needs at least one frame")
    return torch.softmax(scores, dim=-1)


def attentive_pool(hidden: Tensor, scores: Tensor) -> Tensor:
    if hidden.shape[-2] < 1:
        raise DomainError("attentive pooling needs at least one frame")
    if scores.shape != hidden.shape[:-1]:
        raise ShapeError(f"scores {tuple(scores.shape)} do not match hidden {tuple(hidden.shape)}")
    alpha = attention_weights(scores)
    return (alpha.unsqueeze(-1) * hidden).sum(dim=-2)


def project_embedding(pooled: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if weight.dim() != 2 or weight.shape[1] != pooled.shape[-1] or bias.shape != (weight.shape[0],):
        raise ShapeError(
            f"projection {tuple(weight.shape)} / bias {tuple(bias.shape)} does not accept width {pooled.shape[-1]}"
        )
    return pooled @ weight.T + bias


class EmbeddingNetwork(nn.Module):
    """Frames ``(B, T, F)`` to embeddings ``(B, D)``.

    Two tanh layers per frame, attentive pooling, affine projection. No length
    normalisation is applied here; the classifier heads normalise internally.
    """

    def __init__(self, feat_dim: int, hidden_dim: int, embed_dim: int, num_frame_layers: int = 2):
        super().__init__()
        widths = [feat_dim] + [hidden_dim] * num_frame_layers
        self.frame_layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(widths[:-1], widths[1:]))
        self.att_weight = nn.Parameter(torch.empty(hidden_dim, hidden_dim))
        self.att_bias = nn.Parameter(torch.empty(hidden_dim))
        self.att_v = nn.Parameter(torch.empty(hidden_dim))
        self.projection = nn.Linear(hidden_dim, embed_dim)
        self.feat_dim = feat_dim
        self.hidden_dim = hidden_dim
        self.embed_dim = embed_dim

    def frame_params(self) -> list[FrameLayer]:
        return [(layer.weight, layer.bias, "tanh") for layer in self.frame_layers]

    def reset_parameters(self, generator: torch.Generator) -> None:
        with torch.no_grad():
            for layer in self.frame_layers:
                _uniform_(layer.weight, generator, layer.in_features ** -0.5)
                layer.bias.zero_()
            _uniform_(self.att_weight, generator, self.hidden_dim ** -0.5)
            self.att_bias.zero_()
            _uniform_(self.att_v, generator, self.hidden_dim ** -0.5)
            _uniform_(self.projection.weight, generator, self.hidden_dim ** -0.5)
            self.projection.bias.zero_()

    def hidden(self, frames: Tensor) -> Tensor:
        return encode_frames(frames, self.frame_params())

    def pooling_weights(self, frames: Tensor) -> Tensor:
        h = self.hidden(frames)
        return attention_weights(attention_scores(h, self.att_weight, self.att_bias, self.att_v))

    def forward(self, frames: Tensor) -> Tensor:
        h = self.hidden(frames)
        e = attention_scores(h, self.att_weight, self.att_bias, self.att_v)
        pooled = attentive_pool(h, e)
        return project_embedding(pooled, self.projection.weight, self.projection.bias)


def _uniform_(t: Tensor, generator: torch.Generator, bound: float) -> None:
    t.copy_((torch.rand(t.shape, generator=generator, dtype=t.dtype) * 2 - 1) * bound)


@dataclass(eq=False)
class EmbeddingRecord:
    id: str
    y: int
    n: int
    omega: np.ndarray


def write_embedding_dump(path: str | Path, records: Iterable[EmbeddingRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            omega = np.asarray(r.omega, dtype=np.float64)
            if not np.all(np.isfinite(omega)):
                raise ValueError(f"embedding {r.id} is not finite")
            fh.write(json.dumps({"id": r.id, "y": int(r.y), "n": int(r.n), "omega": omega.tolist()}) + "\n")


def read_embedding_dump(path: str | Path) -> list[EmbeddingRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out.append(EmbeddingRecord(rec["id"], rec["y"], rec["n"], np.array(rec["omega"], dtype=np.float64)))
    return out
