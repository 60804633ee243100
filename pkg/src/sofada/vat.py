"""Input-space perturbation that maximally disturbs the classifier.

Finds, per example, the direction of radius xi along which the
predicted distribution changes most, by power iteration on the local
curvature of the KL divergence.  The result is a constant to the
training objective: gradients never flow into it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .datasets import UnlabeledBatch
from .model_core import ModelHandle

_DEGENERATE_NORM = 1e-30


@dataclass(frozen=True)
class VatConfig:
    """xi: perturbation radius; fd_step: curvature probe scale.

    ``fd_step=None`` picks 1e-6 for double-precision models and 1e-3
    for single precision; the probe must sit above rounding noise.
    """

    xi: float = 0.5
    power_iters: int = 1
    fd_step: float | None = None

    def __post_init__(self) -> None:
        if not self.xi > 0:
            raise ValueError(f"xi must be > 0, got {self.xi}")
        if self.power_iters < 1:
            raise ValueError(f"power_iters must be >= 1, got {self.power_iters}")
        if self.fd_step is not None and not self.fd_step > 0:
            raise ValueError(f"fd_step must be > 0, got {self.fd_step}")

    def resolve_fd_step(self, dtype: torch.dtype) -> float:
        if self.fd_step is not None:
            return self.fd_step
        return 1e-6 if dtype == torch.float64 else 1e-3


def _row_normalize(d: torch.Tensor, fallback: torch.Tensor) -> torch.Tensor:
    """Unit-normalize each row; rows with vanishing norm keep the fallback
    direction (the documented degenerate case, e.g. a locally flat model)."""
    norms = d.norm(dim=1, keepdim=True)
    safe = torch.where(norms > _DEGENERATE_NORM, d / norms.clamp_min(_DEGENERATE_NORM), fallback)
    return safe


def find_perturbation(
    classifier: ModelHandle,
    x: UnlabeledBatch | np.ndarray | torch.Tensor,
    cfg: VatConfig,
    rng: np.random.Generator | None = None,
) -> torch.Tensor:
    """The radius-xi direction that most changes the prediction, per row.

    Every returned row has Euclidean norm xi.  Deterministic given the
    random-direction generator.
    """
    from .losses import kl_divergence
    from .models import classify

    if rng is None:
        rng = np.random.default_rng(0)
    inputs = x.inputs if isinstance(x, UnlabeledBatch) else x
    xt = classifier.as_tensor(inputs).detach()
    step = cfg.resolve_fd_step(xt.dtype)

    clean = classify(classifier, xt).probs.detach()
    raw = rng.normal(size=tuple(xt.shape))
    d = torch.as_tensor(raw, dtype=xt.dtype)
    d = d / d.norm(dim=1, keepdim=True)
    initial = d

    for _ in range(cfg.power_iters):
        probe = d.clone().requires_grad_(True)
        perturbed = classify(classifier, xt + step * probe).probs
        divergence = kl_divergence(clean, perturbed)
        (grad_d,) = torch.autograd.grad(divergence, probe)
        d = _row_normalize(grad_d.detach(), fallback=initial)

    return (cfg.xi * d).detach()
