"""Framework-facing abstraction over differentiable parametric maps.

Wraps a ``torch.nn.Module`` behind a handle that exposes forward
evaluation, gradient computation and a flat, ordered view of the
parameters.  Everything downstream (losses, trainer, checkpoints)
talks to the handle, never to torch directly, so the parameter layout
is a stable contract: named-parameter order, row-major within each
tensor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

PROB_EPS = 1e-7


class ShapeMismatchError(ValueError):
    """Raised when a flat parameter vector does not fit the model layout."""


class NonFiniteLossError(FloatingPointError):
    """Raised when a loss evaluates to NaN or infinity."""

    def __init__(self, message: str, loss_value: float):
        super().__init__(message)
        self.loss_value = loss_value


LayerSpec = tuple[tuple[str, tuple[int, ...]], ...]


@dataclass
class ModelHandle:
    """A differentiable map plus a stable flat view of its parameters.

    ``noise_dim`` / ``class_count`` are interface metadata filled in by
    the builders where they apply (generators, classifiers).
    """

    module: torch.nn.Module
    name: str = "model"
    noise_dim: int | None = None
    class_count: int | None = None

    def __post_init__(self) -> None:
        self.layer_spec: LayerSpec = tuple(
            (pname, tuple(p.shape)) for pname, p in self.module.named_parameters()
        )
        self.param_count: int = sum(
            int(np.prod(shape)) if shape else 1 for _, shape in self.layer_spec
        )

    @property
    def dtype(self) -> torch.dtype:
        return next(self.module.parameters()).dtype

    def forward(self, inputs) -> torch.Tensor:
        return self.module(self.as_tensor(inputs))

    def __call__(self, inputs) -> torch.Tensor:
        return self.forward(inputs)

    def as_tensor(self, inputs) -> torch.Tensor:
        if isinstance(inputs, torch.Tensor):
            if inputs.dtype != self.dtype and inputs.is_floating_point():
                return inputs.to(self.dtype)
            return inputs
        arr = np.asarray(inputs)
        if np.issubdtype(arr.dtype, np.floating):
            return torch.as_tensor(arr, dtype=self.dtype)
        return torch.as_tensor(arr)

    def parameters(self) -> list[torch.nn.Parameter]:
        return [p for _, p in self.module.named_parameters()]


@dataclass
class ParamVector:
    """Flat, ordered copy of a model's parameters (or gradients)."""

    values: np.ndarray
    layout: LayerSpec

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values)
        expected = sum(int(np.prod(s)) if s else 1 for _, s in self.layout)
        if self.values.ndim != 1 or self.values.size != expected:
            raise ShapeMismatchError(
                f"flat vector of length {self.values.size} does not match "
                f"layout of total size {expected}"
            )

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)


@dataclass
class PredictionDistribution:
    """Per-row class probabilities of shape B x K.

    ``probs`` rows sum to 1; ``logits``/``features`` are populated only
    when the classifier was asked for them.
    """

    probs: torch.Tensor
    logits: torch.Tensor | None = None
    features: torch.Tensor | None = None

    def numpy(self) -> np.ndarray:
        return self.probs.detach().cpu().numpy()


def snapshot_params(model: ModelHandle) -> ParamVector:
    """Copy the parameters into an independent flat vector.

    The copy shares no storage with the model; training afterwards does
    not change it.
    """
    with torch.no_grad():
        flat = torch.cat([p.detach().reshape(-1) for p in model.parameters()])
    return ParamVector(flat.cpu().numpy().copy(), model.layer_spec)


def restore_params(model: ModelHandle, params: ParamVector) -> None:
    """Write a flat vector back into the model, layer by layer."""
    if params.layout != model.layer_spec:
        for (name_a, shape_a), (name_b, shape_b) in zip(params.layout, model.layer_spec):
            if name_a != name_b or shape_a != shape_b:
                raise ShapeMismatchError(
                    f"layout mismatch at layer {name_b!r}: vector has "
                    f"({name_a!r}, {shape_a}), model expects {shape_b}"
                )
        raise ShapeMismatchError(
            f"layout mismatch: vector has {len(params.layout)} layers, "
            f"model has {len(model.layer_spec)}"
        )
    if params.values.size != model.param_count:
        raise ShapeMismatchError(
            f"vector length {params.values.size} != param_count {model.param_count}"
        )
    offset = 0
    with torch.no_grad():
        for (name, shape), p in zip(model.layer_spec, model.parameters()):
            n = int(np.prod(shape)) if shape else 1
            chunk = params.values[offset : offset + n].reshape(shape)
            p.copy_(torch.as_tensor(chunk, dtype=p.dtype))
            offset += n


def grad(
    model: ModelHandle,
    scalar_loss_fn: Callable[[ModelHandle, object], torch.Tensor],
    inputs,
) -> ParamVector:
    """d(loss)/d(theta) in the same flat layout as ``snapshot_params``.

    ``scalar_loss_fn(model, inputs)`` must return a 0-d differentiable
    tensor.  Parameters the loss never touches get zero gradient.
    """
    params = model.parameters()
    loss = scalar_loss_fn(model, inputs)
    loss_value = float(loss.detach())
    if not np.isfinite(loss_value):
        raise NonFiniteLossError(
            f"loss on {model.name} is non-finite ({loss_value})", loss_value
        )
    if not loss.requires_grad:
        # Loss has no path to any parameter (e.g. a constant).
        return ParamVector(np.zeros(model.param_count), model.layer_spec)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    flat = torch.cat(
        [
            (g if g is not None else torch.zeros_like(p)).reshape(-1)
            for g, p in zip(grads, params)
        ]
    )
    return ParamVector(flat.detach().cpu().numpy().copy(), model.layer_spec)


def finite_difference_grad(
    model: ModelHandle,
    scalar_loss_fn: Callable[[ModelHandle, object], torch.Tensor],
    inputs,
    step: float = 1e-5,
) -> ParamVector:
    """Central finite-difference gradient; the independent oracle for ``grad``.

    Evaluates the loss 2 * param_count times, so only usable on small
    models in tests.
    """
    base = snapshot_params(model)
    perturbed = base.copy()
    out = np.zeros(model.param_count, dtype=np.float64)
    for i in range(model.param_count):
        perturbed.values[i] = base.values[i] + step
        restore_params(model, perturbed)
        plus = float(scalar_loss_fn(model, inputs).detach())
        perturbed.values[i] = base.values[i] - step
        restore_params(model, perturbed)
        minus = float(scalar_loss_fn(model, inputs).detach())
        perturbed.values[i] = base.values[i]
        out[i] = (plus - minus) / (2.0 * step)
    restore_params(model, base)
    return ParamVector(out, model.layer_spec)


def param_distance(a: ParamVector, b: ParamVector) -> float:
    """Euclidean distance between two same-layout parameter vectors."""
    if a.layout != b.layout:
        raise ShapeMismatchError("cannot compare vectors with different layouts")
    return float(np.linalg.norm(a.values.astype(np.float64) - b.values.astype(np.float64)))


def stable_log_softmax(logits: torch.Tensor) -> torch.Tensor:
    """Log-probabilities via the log-sum-exp path (no overflow for large logits)."""
    return logits - torch.logsumexp(logits, dim=-1, keepdim=True)


def probs_from_logits(logits: torch.Tensor) -> torch.Tensor:
    return stable_log_softmax(logits).exp()


def as_prob_tensor(pred) -> torch.Tensor:
    """Accept a PredictionDistribution, tensor or array; return the prob tensor."""
    if isinstance(pred, PredictionDistribution):
        return pred.probs
    if isinstance(pred, torch.Tensor):
        return pred
    return torch.as_tensor(np.asarray(pred, dtype=np.float64))
