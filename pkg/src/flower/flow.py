"""Conditional affine-coupling flow over ``T x F`` frame matrices.

Each coupling layer splits the feature axis into halves ``z_a`` / ``z_b``
(orientation alternates layer to layer) and applies::

    z_a' = z_a
    z_b' = z_b * exp(sigma(z_a, omega)) + mu(z_a, omega)

so the log-determinant is the sum of ``sigma`` over the transformed half.
``omega`` enters every time step through a learned projection (global
conditioning). All batch dimensions broadcast, which is what lets the
mutual-information estimator score every ``(x_i, omega_j)`` pair in one pass.
"""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn

from .errors import NumericalError, ShapeError, ValidationError

LOG_2PI = math.log(2.0 * math.pi)


class CouplingLayer(nn.Module):
    def __init__(self, feat_dim: int, cond_dim: int, hidden_dim: int, flip: bool, s_max: float = 5.0):
        super().__init__()
        if feat_dim < 2 or feat_dim % 2:
            raise ValidationError("coupling layers need an even feature width")
        half = feat_dim // 2
        self.half = half
        self.flip = flip
        self.s_max = s_max
        self.inp = nn.Linear(half, hidden_dim)
        self.cond = nn.Linear(cond_dim, hidden_dim, bias=False)
        self.out = nn.Linear(hidden_dim, 2 * half)

    def split(self, z: Tensor) -> tuple[Tensor, Tensor]:
        lo, hi = z[..., : self.half], z[..., self.half :]
        return (hi, lo) if self.flip else (lo, hi)

    def merge(self, z_a: Tensor, z_b: Tensor) -> Tensor:
        z_a, z_b = torch.broadcast_tensors(z_a, z_b)
        return torch.cat((z_b, z_a) if self.flip else (z_a, z_b), dim=-1)


def conditioner_apply(layer: CouplingLayer, z_a: Tensor, omega: Tensor) -> tuple[Tensor, Tensor]:
    """``(sigma, mu)`` for ``z_a`` of shape ``(..., T, F/2)`` and ``omega`` of shape ``(..., D)``."""
    if z_a.shape[-1] != layer.half:
        raise ShapeError(f"z_a width {z_a.shape[-1]} != {layer.half}")
    if omega.shape[-1] != layer.cond.in_features:
        raise ShapeError(f"omega width {omega.shape[-1]} != {layer.cond.in_features}")
    h = torch.tanh(layer.inp(z_a) + layer.cond(omega).unsqueeze(-2))
    raw_sigma, mu = layer.out(h).chunk(2, dim=-1)
    sigma = layer.s_max * torch.tanh(raw_sigma / layer.s_max)
    return sigma, mu


def _check_finite(t: Tensor, what: str, index: int | None) -> None:
    if not bool(torch.isfinite(t).all()):
        raise NumericalError(f"non-finite {what}", layer=index)


def layer_forward(layer: CouplingLayer, z: Tensor, omega: Tensor, index: int | None = None) -> tuple[Tensor, Tensor]:
    z_a, z_b = layer.split(z)
    sigma, mu = conditioner_apply(layer, z_a, omega)
    _check_finite(sigma, "scale", index)
    _check_finite(mu, "shift", index)
    z_b = z_b * torch.exp(sigma) + mu
    _check_finite(z_b, "coupling output", index)
    return layer.merge(z_a, z_b), sigma.sum(dim=(-2, -1))


def layer_inverse(layer: CouplingLayer, z: Tensor, omega: Tensor, index: int | None = None) -> Tensor:
    z_a, z_b = layer.split(z)
    sigma, mu = conditioner_apply(layer, z_a, omega)
    _check_finite(sigma, "scale", index)
    _check_finite(mu, "shift", index)
    z_b = (z_b - mu) * torch.exp(-sigma)
    _check_finite(z_b, "inverse coupling output", index)
    return layer.merge(z_a, z_b)


class ConditionalFlow(nn.Module):
    """Stack of coupling layers with a standard-normal base over ``T x F``."""

    def __init__(self, frames: int, feat_dim: int, cond_dim: int, num_layers: int = 4, hidden_dim: int = 32, s_max: float = 5.0):
        super().__init__()
        if num_layers < 1:
            raise ValidationError("a flow needs at least one coupling layer")
        if frames < 1:
            raise ValidationError("frames must be >= 1")
        self.frames = frames
        self.feat_dim = feat_dim
        self.cond_dim = cond_dim
        self.layers = nn.ModuleList(
            CouplingLayer(feat_dim, cond_dim, hidden_dim, flip=bool(i % 2), s_max=s_max) for i in range(num_layers)
        )

    @property
    def event_dims(self) -> int:
        return self.frames * self.feat_dim

    def reset_parameters(self, generator: torch.Generator, scale: float = 1.0, zero_output: bool = True) -> None:
        """Uniform fan-in init; with ``zero_output`` every layer starts as the identity."""
        with torch.no_grad():
            for layer in self.layers:
                for lin in (layer.inp, layer.cond, layer.out):
                    bound = scale * lin.in_features ** -0.5
                    lin.weight.copy_((torch.rand(lin.weight.shape, generator=generator, dtype=lin.weight.dtype) * 2 - 1) * bound)
                    if lin.bias is not None:
                        lin.bias.copy_((torch.rand(lin.bias.shape, generator=generator, dtype=lin.bias.dtype) * 2 - 1) * bound)
                if zero_output:
                    layer.out.weight.zero_()
                    layer.out.bias.zero_()

    def _check_shapes(self, x: Tensor, omega: Tensor) -> None:
        if x.shape[-2:] != (self.frames, self.feat_dim):
            raise ShapeError(f"data must end in ({self.frames}, {self.feat_dim}), got {tuple(x.shape)}")
        if omega.shape[-1] != self.cond_dim:
            raise ShapeError(f"omega width {omega.shape[-1]} != {self.cond_dim}")

    def forward(self, x: Tensor, omega: Tensor) -> tuple[Tensor, Tensor]:
        """Map data to latent; returns ``(z, total log-det)``."""
        self._check_shapes(x, omega)
        z = x
        logdet = torch.zeros((), dtype=x.dtype)
        for i, layer in enumerate(self.layers):
            z, ld = layer_forward(layer, z, omega, index=i)
            logdet = logdet + ld
        return z, logdet

    def inverse(self, z: Tensor, omega: Tensor) -> Tensor:
        self._check_shapes(z, omega)
        x = z
        for i in reversed(range(len(self.layers))):
            x = layer_inverse(self.layers[i], x, omega, index=i)
        return x

    def log_prob(self, x: Tensor, omega: Tensor) -> Tensor:
        """Total conditional log-density (nats) per broadcast batch element."""
        z, logdet = self.forward(x, omega)
        base = -0.5 * (z * z).sum(dim=(-2, -1)) - 0.5 * self.event_dims * LOG_2PI
        return base + logdet


def conditional_log_likelihood(model: ConditionalFlow, x: Tensor, omega: Tensor) -> Tensor:
    return model.log_prob(x, omega)


def nll_loss(model: ConditionalFlow, xs: Tensor, omegas: Tensor) -> Tensor:
    """Mean negative log-likelihood per data dimension."""
    if xs.dim() < 3 or xs.shape[0] == 0:
        raise ShapeError("nll_loss expects a non-empty (B, T, F) batch")
    return -(model.log_prob(xs, omegas) / model.event_dims).mean()
