"""Scalar training objectives for the adversarial and classifier updates.

All functions are pure: they map clamped probabilities (or parameter
vectors) to 0-d tensors and are differentiable wherever gradients are
needed.  Probabilities are clamped to [1e-7, 1 - 1e-7] before any log,
because every objective here diverges at {0, 1}.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .model_core import ModelHandle, ParamVector, ShapeMismatchError, as_prob_tensor
from .datasets import UnlabeledBatch

PROB_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    """Relative weights of the generator and classifier loss terms."""

    lambda_s: float = 1.0
    lambda_g: float = 0.1
    lambda_w: float = 1e-4
    lambda_clu: float = 1.0

    def __post_init__(self) -> None:
        for name in ("lambda_s", "lambda_g", "lambda_w", "lambda_clu"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


def _clamped(p) -> torch.Tensor:
    t = as_prob_tensor(p)
    return torch.clamp(t, PROB_EPS, 1.0 - PROB_EPS)


def discriminator_loss(d_real, d_fake) -> torch.Tensor:
    """-mean log D(x_t) - mean log(1 - D(x_g)); minimized over D."""
    real = _clamped(d_real)
    fake = _clamped(d_fake)
    if real.shape != fake.shape:
        raise ValueError(
            f"real/fake batches must match: {tuple(real.shape)} vs {tuple(fake.shape)}"
        )
    return -(torch.log(real).mean() + torch.log(1.0 - fake).mean())


def generator_adversarial_loss(d_fake, mode: str = "saturating") -> torch.Tensor:
    """Adversarial pull on G: make D call the generated batch real.

    ``saturating`` is mean log(1 - D(x_g)); ``nonsaturating`` is the
    usual -mean log D(x_g), whose gradient does not vanish while D wins.
    """
    fake = _clamped(d_fake)
    if mode == "saturating":
        return torch.log(1.0 - fake).mean()
    if mode == "nonsaturating":
        return -torch.log(fake).mean()
    raise ValueError(f"unknown generator loss mode {mode!r}")


def semantic_loss(pred, labels) -> torch.Tensor:
    """Cross-entropy between predictions on generated samples and the
    labels that conditioned their generation; drives the generator."""
    probs = _clamped(pred)
    idx = torch.as_tensor(np.asarray(labels), dtype=torch.int64)
    picked = probs[torch.arange(len(idx)), idx]
    return -torch.log(picked).mean()


def generated_sample_loss(pred_on_generated, labels) -> torch.Tensor:
    """Same cross-entropy form as ``semantic_loss`` but applied in the
    classifier update, so gradients flow into the classifier instead."""
    return semantic_loss(pred_on_generated, labels)


def weight_regularizer(theta: ParamVector, anchor: ParamVector) -> torch.Tensor:
    """Squared Euclidean distance to the frozen source parameters.

    With a zero anchor this reduces to standard weight decay.
    """
    if theta.layout != anchor.layout:
        raise ShapeMismatchError("theta and anchor have different layouts")
    diff = torch.as_tensor(theta.values) - torch.as_tensor(anchor.values)
    return (diff * diff).sum()


def weight_regularizer_live(model: ModelHandle, anchor: ParamVector) -> torch.Tensor:
    """Differentiable variant evaluated on the model's live parameters."""
    if anchor.layout != model.layer_spec:
        raise ShapeMismatchError("anchor layout does not match model")
    total = None
    offset = 0
    for (name, shape), p in zip(model.layer_spec, model.parameters()):
        n = int(np.prod(shape)) if shape else 1
        ref = torch.as_tensor(
            anchor.values[offset : offset + n].reshape(shape), dtype=p.dtype
        )
        term = ((p - ref) ** 2).sum()
        total = term if total is None else total + term
        offset += n
    return total


def conditional_entropy(pred) -> torch.Tensor:
    """Mean over the batch of -sum_k p_k log p_k; in [0, log K]."""
    probs = _clamped(pred)
    return -(probs * torch.log(probs)).sum(dim=-1).mean()


def kl_divergence(p, q) -> torch.Tensor:
    """Mean over the batch of sum_k p_k log(p_k / q_k)."""
    pt = _clamped(p)
    qt = _clamped(q)
    if pt.shape != qt.shape:
        raise ValueError(f"shape mismatch: {tuple(pt.shape)} vs {tuple(qt.shape)}")
    return (pt * (torch.log(pt) - torch.log(qt))).sum(dim=-1).mean()


def clustering_regularizer(
    classifier: ModelHandle,
    x_t: UnlabeledBatch | np.ndarray | torch.Tensor,
    xi: float,
    power_iters: int = 1,
    fd_step: float | None = None,
    rng: np.random.Generator | None = None,
    include_smoothness: bool = True,
) -> torch.Tensor:
    """Conditional entropy plus the adversarial-perturbation KL penalty.

    The clean prediction enters the KL as a constant, so the smoothness
    term only pushes the perturbed prediction toward it.
    """
    from .vat import VatConfig, find_perturbation  # local import: vat builds on losses

    from .models import classify

    inputs = x_t.inputs if isinstance(x_t, UnlabeledBatch) else x_t
    clean = classify(classifier, inputs).probs
    value = conditional_entropy(clean)
    if include_smoothness:
        cfg = VatConfig(xi=xi, power_iters=power_iters, fd_step=fd_step)
        r = find_perturbation(classifier, inputs, cfg, rng=rng)
        perturbed = classify(classifier, classifier.as_tensor(inputs) + r).probs
        value = value + kl_divergence(clean.detach(), perturbed)
    return value
