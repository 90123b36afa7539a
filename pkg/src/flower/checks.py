"""Self-verification suites shared by the CLI and the acceptance tests.

``gradient_suite`` compares autograd against central differences on tiny
seeded instances of every differentiable piece of the model.
``mi_suite`` runs the CLUB estimator against the bivariate-normal family,
where the true conditional density and the true MI are known in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor

from .encoder import EmbeddingNetwork
from .flow import ConditionalFlow
from .miest import GaussianConditional, club_estimate, gaussian_mi_oracle
from .objectives import AAMHead, OCSHead
from .optim import gradient_check
from .trainer import ModelConfig, embedding_objective, init_state

GRADIENT_CASES = ("sap_pipeline", "aam_loss", "ocs_loss", "flow_loglik", "l_total")


@dataclass(frozen=True)
class CheckResult:
    name: str
    value: float
    threshold: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"[{tag}] {self.name}: {self.value:.3e} vs {self.threshold:.3e}{extra}"


def _randn(gen: torch.Generator, *shape: int) -> Tensor:
    return torch.randn(*shape, generator=gen, dtype=torch.float64)


def _sap_case(seed: int) -> tuple[Callable[[], Tensor], list[Tensor]]:
    gen = torch.Generator().manual_seed(seed)
    net = EmbeddingNetwork(4, 3, 2).double()
    net.reset_parameters(gen)
    with torch.no_grad():
        for p in net.parameters():
            p.add_(0.3 * _randn(gen, *p.shape))
    frames, direction = _randn(gen, 5, 4), _randn(gen, 2)
    return (lambda: net(frames) @ direction), list(net.parameters())


def _aam_case(seed: int) -> tuple[Callable[[], Tensor], list[Tensor]]:
    gen = torch.Generator().manual_seed(seed)
    head = AAMHead(3, 3, scale=5.0, margin=0.2).double()
    head.reset_parameters(gen)
    emb = _randn(gen, 4, 3).requires_grad_(True)
    labels = torch.tensor([0, 1, 2, 1])
    return (lambda: head(emb, labels)), [emb, head.weight]


def _ocs_case(seed: int) -> tuple[Callable[[], Tensor], list[Tensor]]:
    gen = torch.Generator().manual_seed(seed)
    head = OCSHead(3, k=5.0).double()
    head.reset_parameters(gen)
    emb = _randn(gen, 6, 3).requires_grad_(True)
    labels = torch.tensor([0, 1, 0, 1, 1, 0])
    return (lambda: head(emb, labels)), [emb, head.weight]


def _flow_case(seed: int) -> tuple[Callable[[], Tensor], list[Tensor]]:
    gen = torch.Generator().manual_seed(seed)
    flow = ConditionalFlow(2, 2, 2, num_layers=2, hidden_dim=3).double()
    flow.reset_parameters(gen, scale=1.0, zero_output=False)
    x, omega = _randn(gen, 2, 2).requires_grad_(True), _randn(gen, 2).requires_grad_(True)
    return (lambda: flow.log_prob(x, omega)), [x, omega] + list(flow.parameters())


def _total_case(seed: int) -> tuple[Callable[[], Tensor], list[Tensor]]:
    mc = ModelConfig(frame_hidden=5, embed_dim=3, flow_layers=2, flow_hidden=4, aam_scale=4.0)
    state = init_state(mc, seed, 2, 4, 3)
    gen = torch.Generator().manual_seed(seed + 1)
    state.flow.reset_parameters(gen, scale=1.0, zero_output=False)
    x = _randn(gen, 4, 2, 4)
    y = torch.tensor([0, 1, 2, 0])
    fn = lambda: embedding_objective(state, x, y, 0.5, "all_pairs", np.random.default_rng(seed))[2]
    return fn, state.theta()


_BUILDERS = {
    "sap_pipeline": _sap_case,
    "aam_loss": _aam_case,
    "ocs_loss": _ocs_case,
    "flow_loglik": _flow_case,
    "l_total": _total_case,
}


def _corrupted_grads(fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[Tensor]:
    grads = [g.detach().clone() for g in torch.autograd.grad(fn(), list(params))]
    # double the largest-magnitude coordinate so the detector has something to find
    k = max(range(len(grads)), key=lambda i: float(grads[i].abs().max()))
    flat = grads[k].view(-1)
    flat[int(flat.abs().argmax())] *= 2.0
    return grads


def gradient_case(name: str, seed: int, eps: float = 1e-5, max_coords: int | None = None, corrupt: bool = False) -> float:
    fn, params = _BUILDERS[name](seed)
    grads = _corrupted_grads(fn, params) if corrupt else None
    return gradient_check(fn, params, eps=eps, max_coords=max_coords, seed=seed, grads=grads)


def gradient_suite(
    instances: int = 20,
    tol: float = 1e-3,
    eps: float = 1e-5,
    max_coords: int | None = None,
    corrupt: bool = False,
    cases: Sequence[str] = GRADIENT_CASES,
) -> list[CheckResult]:
    out = []
    for name in cases:
        worst = max(gradient_case(name, s, eps, max_coords, corrupt) for s in range(instances))
        out.append(CheckResult(f"grad/{name}", worst, tol, worst < tol, f"{instances} instances"))
    return out


def mi_suite(
    rhos: Sequence[float] = (0.0, 0.5, 0.9),
    batch: int = 100_000,
    mode: str = "all_pairs",
    seed: int = 0,
    dims: int = 1,
) -> list[CheckResult]:
    """Upper-bound check for rho != 0 and a null check for rho == 0, each at 3 s.e."""
    rng = np.random.default_rng(seed)
    out = []
    for rho in rhos:
        model = GaussianConditional(rho, dims)
        x, w = model.sample(batch, rng)
        est = club_estimate(x, w, model, mode, rng=rng)
        mi = gaussian_mi_oracle(rho, dims)
        margin = 3 * est.stderr
        if rho == 0:
            ok = abs(est.value) <= margin
            detail = f"rho=0, |estimate| within 3 s.e. = {margin:.2e}"
            value = abs(est.value)
            threshold = margin
        else:
            ok = est.value >= mi - margin
            detail = f"rho={rho}, estimate {est.value:.6f} >= MI {mi:.6f} - 3 s.e."
            value, threshold = est.value, mi - margin
        out.append(CheckResult(f"mi/rho={rho}", value, threshold, ok, detail))
    return out
