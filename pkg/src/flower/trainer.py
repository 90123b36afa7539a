"""Alternating embedding / flow training.

Epoch 0 is a warm-up that trains the embedding network and its classifier
head (``theta``) on the discriminative loss alone. Every later epoch first
fits the conditional flow (``phi``) to the current, frozen embeddings by
maximum likelihood, then freezes the flow and descends

    L_total = L_xent + beta * L_redundancy

in ``theta``, where ``L_redundancy`` is the CLUB estimate computed through
the flow. Gradients of the redundancy term reach ``theta`` through both the
paired and the unpaired likelihoods.

All randomness comes from named sub-streams of a single seed, so the
embedding batch order does not depend on anything the flow phase draws.
"""

from __future__ import annotations

import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, NamedTuple, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .encoder import EmbeddingNetwork
from .errors import NumericalError, ValidationError
from .flow import ConditionalFlow, nll_loss
from .miest import MODES, redundancy_loss
from .objectives import AAMHead, OCSHead
from .optim import AdamHyper, AdamSlots, adam_update, param_digest
from .synthdata import Utterance, stack

log = logging.getLogger(__name__)

RNG_STREAMS = ("embed_batches", "flow_batches", "negatives")


@dataclass(frozen=True)
class ModelConfig:
    frame_hidden: int = 32
    embed_dim: int = 16
    flow_layers: int = 4
    flow_hidden: int = 32
    s_max: float = 5.0
    aam_scale: float = 30.0
    aam_margin: float = 0.2
    ocs_k: float = 20.0
    ocs_m0: float = 0.9
    ocs_m1: float = 0.2

    def validate(self) -> "ModelConfig":
        for key in ("frame_hidden", "embed_dim", "flow_layers", "flow_hidden"):
            if getattr(self, key) < 1:
                raise ValidationError(f"{key} must be >= 1")
        if self.s_max <= 0:
            raise ValidationError("s_max must be positive")
        return self


@dataclass(frozen=True)
class TrainConfig:
    beta: float = 0.001
    epochs: int = 30
    batch_size: int = 64
    lr_embed: float = 0.001
    lr_flow: float = 0.001
    lr_decay: float = 0.95
    loss_kind: str = "aam"
    negative_mode: str = "auto"
    flow_steps_per_epoch: int | None = None
    embed_steps_per_epoch: int | None = None
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    discriminative_only: bool = False

    def validate(self) -> "TrainConfig":
        if not (math.isfinite(self.beta) and self.beta >= 0):
            raise ValidationError("beta must be a finite non-negative number")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.batch_size < 1 or (self.beta > 0 and self.batch_size < 2):
            raise ValidationError("batch_size must be >= 2 when beta > 0 (CLUB needs pairs)")
        if self.lr_embed <= 0 or self.lr_flow <= 0:
            raise ValidationError("learning rates must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValidationError("lr_decay must lie in (0, 1]")
        if self.loss_kind not in ("aam", "ocs"):
            raise ValidationError("loss_kind must be 'aam' or 'ocs'")
        if self.negative_mode not in MODES + ("auto",):
            raise ValidationError("negative_mode must be 'auto', 'all_pairs' or 'derangement'")
        for key in ("flow_steps_per_epoch", "embed_steps_per_epoch"):
            v = getattr(self, key)
            if v is not None and v < 1:
                raise ValidationError(f"{key} must be >= 1 when given")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and self.adam_eps > 0):
            raise ValidationError("invalid Adam hyperparameters")
        return self

    @property
    def adam(self) -> AdamHyper:
        return AdamHyper(self.adam_beta1, self.adam_beta2, self.adam_eps)


def sub_seed(seed: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(sub_seed(seed, name)))


@dataclass
class ModelState:
    embedder: EmbeddingNetwork
    head: nn.Module
    flow: ConditionalFlow
    theta_slots: AdamSlots
    phi_slots: AdamSlots
    model_config: ModelConfig
    frames: int
    feat_dim: int
    num_classes: int
    loss_kind: str
    epoch: int = 0
    rngs: dict[str, np.random.Generator] = field(default_factory=dict)

    def theta(self) -> list[nn.Parameter]:
        return list(self.embedder.parameters()) + list(self.head.parameters())

    def phi(self) -> list[nn.Parameter]:
        return list(self.flow.parameters())

    def named_theta(self) -> list[tuple[str, nn.Parameter]]:
        return [(f"embedder.{k}", p) for k, p in self.embedder.named_parameters()] + [
            (f"head.{k}", p) for k, p in self.head.named_parameters()
        ]

    def named_phi(self) -> list[tuple[str, nn.Parameter]]:
        return [(f"flow.{k}", p) for k, p in self.flow.named_parameters()]

    def theta_digest(self) -> str:
        return param_digest(self.theta())

    def phi_digest(self) -> str:
        return param_digest(self.phi())

    def embed(self, frames: Tensor) -> Tensor:
        with torch.no_grad():
            return self.embedder(frames)


def init_state(
    model_config: ModelConfig,
    seed: int,
    frames: int,
    feat_dim: int,
    num_classes: int,
    loss_kind: str = "aam",
) -> ModelState:
    model_config.validate()
    if loss_kind == "ocs" and num_classes != 2:
        raise ValidationError("one-class softmax needs binary labels (num_classes == 2)")
    gen = torch.Generator().manual_seed(int(sub_seed(seed, "init").generate_state(1, np.uint64)[0] >> 1))
    embedder = EmbeddingNetwork(feat_dim, model_config.frame_hidden, model_config.embed_dim).double()
    embedder.reset_parameters(gen)
    if loss_kind == "aam":
        head = AAMHead(num_classes, model_config.embed_dim, model_config.aam_scale, model_config.aam_margin).double()
    else:
        head = OCSHead(model_config.embed_dim, model_config.ocs_k, model_config.ocs_m0, model_config.ocs_m1).double()
    head.reset_parameters(gen)
    flow = ConditionalFlow(
        frames, feat_dim, model_config.embed_dim, model_config.flow_layers, model_config.flow_hidden, model_config.s_max
    ).double()
    flow.reset_parameters(gen)
    state = ModelState(
        embedder=embedder,
        head=head,
        flow=flow,
        theta_slots=AdamSlots.zeros_like(list(embedder.parameters()) + list(head.parameters())),
        phi_slots=AdamSlots.zeros_like(list(flow.parameters())),
        model_config=model_config,
        frames=frames,
        feat_dim=feat_dim,
        num_classes=num_classes,
        loss_kind=loss_kind,
        rngs={name: stream(seed, name) for name in RNG_STREAMS},
    )
    return state


@dataclass
class EpochMetrics:
    epoch: int
    phase: str
    L_xent: float
    L_redundancy: float | None
    L_IB: float
    flow_nll: float | None
    grad_norm_theta: float
    grad_norm_phi: float | None
    lr_embed: float
    lr_flow: float
    wall_time: float = 0.0

    def to_record(self, include_timing: bool = False) -> dict:
        rec = asdict(self)
        if not include_timing:
            rec.pop("wall_time")
        return rec


class PhaseStep(NamedTuple):
    l_xent: float
    l_redundancy: float | None
    l_ib: float
    grad_norm: float


def _grad_norm(grads: Sequence[Tensor]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads))


def _finite(value: float, **where) -> float:
    if not math.isfinite(value):
        raise NumericalError("non-finite loss", **where)
    return value


def embedding_objective(
    state: ModelState,
    xb: Tensor,
    yb: Tensor,
    beta: float,
    negative_mode: str = "auto",
    rng: np.random.Generator | None = None,
    with_redundancy: bool = True,
) -> tuple[Tensor, Tensor | None, Tensor]:
    """``(L_xent, L_redundancy, L_total)`` as graph-connected tensors.

    With ``beta == 0`` the redundancy term is evaluated outside the graph so
    it cannot perturb the gradient, not even by a signed zero.
    """
    omega = state.embedder(xb)
    l_xent = state.head(omega, yb)
    l_red = None
    if with_redundancy:
        if beta > 0:
            l_red = redundancy_loss(xb, omega, state.flow, negative_mode, rng)
            return l_xent, l_red, l_xent + beta * l_red
        with torch.no_grad():
            l_red = redundancy_loss(xb, omega.detach(), state.flow, negative_mode, rng)
    return l_xent, l_red, l_xent


def embedding_phase_step(
    xb: Tensor,
    yb: Tensor,
    state: ModelState,
    config: TrainConfig,
    lr: float,
    with_redundancy: bool = True,
    where: dict | None = None,
) -> PhaseStep:
    """One ``theta`` update on ``L_xent + beta * L_redundancy`` with the flow frozen."""
    where = where or {}
    theta = state.theta()
    l_xent, l_red, total = embedding_objective(
        state, xb, yb, config.beta, config.negative_mode, state.rngs["negatives"], with_redundancy
    )
    lx = _finite(float(l_xent.detach()), phase="embedding", **where)
    lr_val = None if l_red is None else _finite(float(l_red.detach()), phase="embedding", **where)
    grads = torch.autograd.grad(total, theta)
    gnorm = _grad_norm(grads)
    if not math.isfinite(gnorm):
        raise NumericalError("non-finite gradient", phase="embedding", **where)
    adam_update(theta, grads, state.theta_slots, lr, config.adam)
    lib = lx if lr_val is None else lx + config.beta * lr_val
    return PhaseStep(lx, lr_val, lib, gnorm)


def flow_phase_step(
    xb: Tensor,
    state: ModelState,
    config: TrainConfig,
    lr: float,
    where: dict | None = None,
) -> tuple[float, float]:
    """One ``phi`` update on the flow NLL with embeddings extracted under ``no_grad``.

    Returns ``(nll, grad_norm)``; ``theta`` is not touched.
    """
    where = where or {}
    omega = state.embed(xb)
    phi = state.phi()
    nll = nll_loss(state.flow, xb, omega)
    val = _finite(float(nll.detach()), phase="flow", **where)
    grads = torch.autograd.grad(nll, phi)
    gnorm = _grad_norm(grads)
    if not math.isfinite(gnorm):
        raise NumericalError("non-finite gradient", phase="flow", **where)
    adam_update(phi, grads, state.phi_slots, lr, config.adam)
    return val, gnorm


def _batches(rng: np.random.Generator, n: int, batch_size: int, steps: int | None) -> list[np.ndarray]:
    """``steps`` index batches drawn from successive shuffles; the ragged tail of each shuffle is dropped."""
    per_pass = n // batch_size
    if per_pass == 0:
        raise ValidationError(f"dataset of {n} items is smaller than batch_size {batch_size}")
    steps = per_pass if steps is None else steps
    out: list[np.ndarray] = []
    while len(out) < steps:
        perm = rng.permutation(n)
        for k in range(per_pass):
            if len(out) == steps:
                break
            out.append(perm[k * batch_size : (k + 1) * batch_size])
    return out


def as_tensors(dataset: Sequence[Utterance] | tuple) -> tuple[Tensor, Tensor]:
    if isinstance(dataset, tuple):
        x, y = dataset[0], dataset[1]
    else:
        x, y, _ = stack(dataset)
    return torch.as_tensor(np.asarray(x), dtype=torch.float64), torch.as_tensor(np.asarray(y), dtype=torch.long)


AuditHook = Callable[[dict], None]


def train(
    dataset: Sequence[Utterance] | tuple,
    config: TrainConfig,
    model_config: ModelConfig | None = None,
    state: ModelState | None = None,
    on_epoch: Callable[[ModelState, EpochMetrics], None] | None = None,
    audit: AuditHook | None = None,
) -> tuple[ModelState, list[EpochMetrics]]:
    """Run epochs ``state.epoch .. config.epochs - 1``.

    Passing a restored ``state`` continues a run; the result is bit-identical
    to never having stopped. ``audit`` receives one dict per phase with
    parameter digests taken before and after it.
    """
    config.validate()
    x, y = as_tensors(dataset)
    if x.shape[0] == 0:
        raise ValidationError("dataset is empty")
    _, T, F = x.shape
    if state is None:
        num_classes = int(y.max()) + 1
        if config.loss_kind == "ocs":
            num_classes = 2
        state = init_state(model_config or ModelConfig(), config.seed, T, F, max(num_classes, 2), config.loss_kind)
    elif (state.frames, state.feat_dim) != (T, F):
        raise ValidationError("restored state does not match the dataset shape")
    n = x.shape[0]
    history: list[EpochMetrics] = []

    while state.epoch < config.epochs:
        epoch = state.epoch
        start = time.perf_counter()
        decay = config.lr_decay ** epoch
        lr_embed, lr_flow = config.lr_embed * decay, config.lr_flow * decay
        warmup = epoch == 0 or config.discriminative_only

        flow_nll = None
        phi_norm = None
        if not warmup:
            before = _digests(state) if audit else None
            nlls, norms = [], []
            for b, idx in enumerate(_batches(state.rngs["flow_batches"], n, config.batch_size, config.flow_steps_per_epoch)):
                val, gn = flow_phase_step(x[idx], state, config, lr_flow, where={"epoch": epoch, "batch": b})
                nlls.append(val)
                norms.append(gn)
            flow_nll, phi_norm = float(np.mean(nlls)), float(np.mean(norms))
            if audit:
                audit({"epoch": epoch, "phase": "flow", "before": before, "after": _digests(state)})

        before = _digests(state) if audit else None
        xents, reds, norms = [], [], []
        for b, idx in enumerate(_batches(state.rngs["embed_batches"], n, config.batch_size, config.embed_steps_per_epoch)):
            step = embedding_phase_step(
                x[idx], y[idx], state, config, lr_embed, with_redundancy=not warmup, where={"epoch": epoch, "batch": b}
            )
            xents.append(step.l_xent)
            norms.append(step.grad_norm)
            if step.l_redundancy is not None:
                reds.append(step.l_redundancy)
        if audit:
            audit({"epoch": epoch, "phase": "embedding", "before": before, "after": _digests(state)})

        l_xent = float(np.mean(xents))
        l_red = float(np.mean(reds)) if reds else None
        l_ib = l_xent if l_red is None else l_xent + config.beta * l_red
        state.epoch += 1
        metrics = EpochMetrics(
            epoch=epoch,
            phase="warmup" if epoch == 0 and not config.discriminative_only else ("discriminative" if warmup else "alternating"),
            L_xent=l_xent,
            L_redundancy=l_red,
            L_IB=l_ib,
            flow_nll=flow_nll,
            grad_norm_theta=float(np.mean(norms)),
            grad_norm_phi=phi_norm,
            lr_embed=lr_embed,
            lr_flow=lr_flow,
            wall_time=time.perf_counter() - start,
        )
        history.append(metrics)
        log.info(
            "epoch %d xent=%.4f red=%s nll=%s",
            epoch,
            l_xent,
            "-" if l_red is None else f"{l_red:.4f}",
            "-" if flow_nll is None else f"{flow_nll:.4f}",
        )
        if on_epoch is not None:
            on_epoch(state, metrics)
    return state, history


def _digests(state: ModelState) -> dict[str, str]:
    return {"theta": state.theta_digest(), "phi": state.phi_digest()}


def config_from_dict(cls, data: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValidationError(f"unknown {cls.__name__} key(s): {', '.join(sorted(unknown))}")
    return cls(**data)
