"""Desk-scale generator / discriminator / classifier architectures.

Two families: 3-layer perceptrons for 2-D vector data and small conv
nets for digit images.  The generator is class-conditional through a
one-hot label concatenated to the noise at the input; its final
activation is tanh, so outputs live in the same [-1, 1] range as the
data.  Every discriminator weight matrix is spectrally normalized with
persistent power-iteration vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .model_core import ModelHandle, PredictionDistribution, probs_from_logits

PROB_EPS = 1e-7
_SIGMA_EPS = 1e-12


@dataclass(frozen=True)
class GeneratorSpec:
    noise_dim: int
    class_count: int
    output_dim: int
    hidden_widths: tuple[int, ...] = (128, 64)
    image_shape: tuple[int, int, int] | None = None  # (C, H, W) for conv variant
    base_channels: int = 64

    @property
    def input_dim(self) -> int:
        return self.noise_dim + self.class_count


@dataclass(frozen=True)
class DiscriminatorSpec:
    input_dim: int
    hidden_widths: tuple[int, ...] = (128, 64)
    spectral_norm_iters: int = 1
    image_shape: tuple[int, int, int] | None = None
    channels: tuple[int, ...] = (16, 32, 64)


@dataclass(frozen=True)
class ClassifierSpec:
    input_dim: int
    class_count: int
    hidden_widths: tuple[int, ...] = (128, 64)
    image_shape: tuple[int, int, int] | None = None
    channels: tuple[int, ...] = (32, 64, 128)


# ---------------------------------------------------------------------------
# Spectrally normalized layers


class SpectralLinear(nn.Module):
    """Linear layer whose effective weight is W / sigma_hat(W).

    sigma_hat = u . W v with persistent power-iteration vectors u, v.
    The vectors advance only in ``power_iterate`` (called once per
    training step), never during forward, so forward evaluation stays a
    deterministic differentiable function of the parameters.
    """

    def __init__(self, in_features: int, out_features: int, iters: int = 1):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(out_features, in_features))
        self.bias = nn.Parameter(torch.zeros(out_features))
        self.iters = iters
        self.register_buffer("u", torch.zeros(out_features))
        self.register_buffer("v", torch.zeros(in_features))

    def weight_matrix(self) -> torch.Tensor:
        return self.weight

    @torch.no_grad()
    def power_iterate(self) -> None:
        w = self.weight_matrix()
        for _ in range(self.iters):
            self.v = _l2_normalize(w.t() @ self.u)
            self.u = _l2_normalize(w @ self.v)

    def sigma(self) -> torch.Tensor:
        w = self.weight_matrix()
        return torch.dot(self.u, w @ self.v)

    def effective_weight(self) -> torch.Tensor:
        return self.weight / (self.sigma() + _SIGMA_EPS)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return nn.functional.linear(x, self.effective_weight(), self.bias)


class SpectralConv2d(SpectralLinear):
    """Conv layer spectrally normalized on the (out, in*k*k) matrix view."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int, padding: int, iters: int = 1):
        nn.Module.__init__(self)
        self.weight = nn.Parameter(torch.empty(out_ch, in_ch, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(out_ch))
        self.stride = stride
        self.padding = padding
        self.iters = iters
        self.register_buffer("u", torch.zeros(out_ch))
        self.register_buffer("v", torch.zeros(in_ch * kernel * kernel))

    def weight_matrix(self) -> torch.Tensor:
        return self.weight.reshape(self.weight.shape[0], -1)

    def effective_weight(self) -> torch.Tensor:
        return self.weight / (self.sigma() + _SIGMA_EPS)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return nn.functional.conv2d(
            x, self.effective_weight(), self.bias, stride=self.stride, padding=self.padding
        )


def _l2_normalize(v: torch.Tensor) -> torch.Tensor:
    return v / (v.norm() + _SIGMA_EPS)


def apply_spectral_norm(model: ModelHandle) -> None:
    """Advance the power iteration on every normalized layer of the model.

    Call once per discriminator forward/update step.
    """
    for m in model.module.modules():
        if isinstance(m, SpectralLinear):
            m.power_iterate()


def estimated_sigmas(model: ModelHandle) -> list[float]:
    """Current top-singular-value estimates, one per normalized layer."""
    with torch.no_grad():
        return [
            float(m.sigma())
            for m in model.module.modules()
            if isinstance(m, SpectralLinear)
        ]


# ---------------------------------------------------------------------------
# Architectures


class MlpNet(nn.Module):
    """Plain perceptron trunk + linear head; trunk output is the feature layer."""

    def __init__(self, in_dim: int, hidden: tuple[int, ...], out_dim: int, activation: str):
        super().__init__()
        layers: list[nn.Module] = []
        prev = in_dim
        for width in hidden:
            layers.append(nn.Linear(prev, width))
            layers.append(_activation(activation))
            prev = width
        self.trunk = nn.Sequential(*layers)
        self.head = nn.Linear(prev, out_dim)
        self.feature_dim = prev

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.trunk(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.trunk(x))


class TanhMlp(MlpNet):
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.tanh(super().forward(x))


class SpectralMlp(nn.Module):
    """Spectrally normalized perceptron ending in one sigmoid unit."""

    def __init__(self, in_dim: int, hidden: tuple[int, ...], iters: int, activation: str):
        super().__init__()
        layers: list[nn.Module] = []
        prev = in_dim
        for width in hidden:
            layers.append(SpectralLinear(prev, width, iters))
            layers.append(_activation(activation))
            prev = width
        layers.append(SpectralLinear(prev, 1, iters))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        logit = self.net(x).squeeze(-1)
        return torch.clamp(torch.sigmoid(logit), PROB_EPS, 1.0 - PROB_EPS)


class ConvClassifier(nn.Module):
    """3 conv blocks + 1 dense head on flat inputs; features = flattened conv out."""

    def __init__(self, image_shape: tuple[int, int, int], channels: tuple[int, ...], class_count: int):
        super().__init__()
        c, h, w = image_shape
        self.image_shape = image_shape
        blocks: list[nn.Module] = []
        prev = c
        side = h
        for ch in channels:
            blocks.append(nn.Conv2d(prev, ch, 3, stride=2, padding=1))
            blocks.append(nn.ReLU())
            prev = ch
            side = (side + 1) // 2
        self.conv = nn.Sequential(*blocks)
        self.feature_dim = prev * side * side
        self.head = nn.Linear(self.feature_dim, class_count)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        img = x.reshape(-1, *self.image_shape)
        return self.conv(img).reshape(len(x), -1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


class ConvGenerator(nn.Module):
    """Dense projection, reshape, two stride-2 deconvs, tanh; emits flat rows."""

    def __init__(self, in_dim: int, image_shape: tuple[int, int, int], base_channels: int):
        super().__init__()
        c, h, w = image_shape
        if h % 4 or w % 4:
            raise ValueError(f"image sides must be divisible by 4, got {h}x{w}")
        self.image_shape = image_shape
        self.seed_shape = (base_channels, h // 4, w // 4)
        self.fc = nn.Linear(in_dim, int(np.prod(self.seed_shape)))
        self.deconv1 = nn.ConvTranspose2d(base_channels, base_channels // 2, 4, stride=2, padding=1)
        self.deconv2 = nn.ConvTranspose2d(base_channels // 2, c, 4, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = torch.relu(self.fc(x)).reshape(-1, *self.seed_shape)
        z = torch.relu(self.deconv1(z))
        img = torch.tanh(self.deconv2(z))
        return img.reshape(len(img), -1)


class SpectralConvDiscriminator(nn.Module):
    def __init__(self, image_shape: tuple[int, int, int], channels: tuple[int, ...], iters: int):
        super().__init__()
        c, h, w = image_shape
        self.image_shape = image_shape
        blocks: list[nn.Module] = []
        prev = c
        side = h
        for ch in channels:
            blocks.append(SpectralConv2d(prev, ch, 3, stride=2, padding=1, iters=iters))
            blocks.append(nn.LeakyReLU(0.2))
            prev = ch
            side = (side + 1) // 2
        self.conv = nn.Sequential(*blocks)
        self.fc = SpectralLinear(prev * side * side, 1, iters)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        img = x.reshape(-1, *self.image_shape)
        flat = self.conv(img).reshape(len(x), -1)
        logit = self.fc(flat).squeeze(-1)
        return torch.clamp(torch.sigmoid(logit), PROB_EPS, 1.0 - PROB_EPS)


def _activation(name: str) -> nn.Module:
    table = {"relu": nn.ReLU, "lrelu": lambda: nn.LeakyReLU(0.2), "tanh": nn.Tanh}
    if name not in table:
        raise ValueError(f"unknown activation {name!r}")
    return table[name]()


# ---------------------------------------------------------------------------
# Initialization (driven by a numpy generator so runs are seed-reproducible)


def _init_module(module: nn.Module, rng: np.random.Generator) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d, nn.ConvTranspose2d)):
            fan_in = m.weight.shape[1] * (
                int(np.prod(m.weight.shape[2:])) if m.weight.dim() > 2 else 1
            )
            bound = 1.0 / math.sqrt(max(fan_in, 1))
            _fill(m.weight, rng.uniform(-bound, bound, size=tuple(m.weight.shape)))
            if m.bias is not None:
                _fill(m.bias, rng.uniform(-bound, bound, size=tuple(m.bias.shape)))
        elif isinstance(m, SpectralLinear):  # covers SpectralConv2d
            w = m.weight_matrix()
            fan_in = w.shape[1]
            bound = 1.0 / math.sqrt(max(fan_in, 1))
            _fill(m.weight, rng.uniform(-bound, bound, size=tuple(m.weight.shape)))
            _fill(m.bias, rng.uniform(-bound, bound, size=tuple(m.bias.shape)))
            _fill(m.u, _unit(rng, m.u.shape[0]))
            _fill(m.v, _unit(rng, m.v.shape[0]))


def _fill(tensor: torch.Tensor, values: np.ndarray) -> None:
    with torch.no_grad():
        tensor.copy_(torch.as_tensor(values, dtype=tensor.dtype))


def _unit(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=n)
    return v / (np.linalg.norm(v) + 1e-12)


# ---------------------------------------------------------------------------
# Builders


def build_classifier(
    spec: ClassifierSpec, rng: np.random.Generator, dtype: torch.dtype = torch.float32
) -> ModelHandle:
    if spec.image_shape is not None:
        net: nn.Module = ConvClassifier(spec.image_shape, spec.channels, spec.class_count)
    else:
        net = MlpNet(spec.input_dim, spec.hidden_widths, spec.class_count, "relu")
    _init_module(net, rng)
    return ModelHandle(net.to(dtype), name="C", class_count=spec.class_count)


def build_generator(
    spec: GeneratorSpec, rng: np.random.Generator, dtype: torch.dtype = torch.float32
) -> ModelHandle:
    if spec.image_shape is not None:
        net: nn.Module = ConvGenerator(spec.input_dim, spec.image_shape, spec.base_channels)
    else:
        net = TanhMlp(spec.input_dim, spec.hidden_widths, spec.output_dim, "relu")
    _init_module(net, rng)
    return ModelHandle(
        net.to(dtype), name="G", noise_dim=spec.noise_dim, class_count=spec.class_count
    )


def build_discriminator(
    spec: DiscriminatorSpec, rng: np.random.Generator, dtype: torch.dtype = torch.float32
) -> ModelHandle:
    if spec.image_shape is not None:
        net: nn.Module = SpectralConvDiscriminator(
            spec.image_shape, spec.channels, spec.spectral_norm_iters
        )
    else:
        net = SpectralMlp(spec.input_dim, spec.hidden_widths, spec.spectral_norm_iters, "lrelu")
    _init_module(net, rng)
    return ModelHandle(net.to(dtype), name="D")


# ---------------------------------------------------------------------------
# Forward ops


def one_hot(labels, class_count: int, dtype: torch.dtype) -> torch.Tensor:
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.int64)
    if labels.numel() and (labels.min() < 0 or labels.max() >= class_count):
        raise ValueError(f"labels must lie in [0, {class_count})")
    return nn.functional.one_hot(labels, class_count).to(dtype)


def generate(generator: ModelHandle, labels, noise) -> torch.Tensor:
    """Class-conditional samples G(y, z), rows in [-1, 1]."""
    noise_t = generator.as_tensor(noise)
    y = one_hot(labels, generator.class_count, noise_t.dtype)
    if noise_t.shape[1] != generator.noise_dim:
        raise ValueError(
            f"noise has width {noise_t.shape[1]}, generator expects {generator.noise_dim}"
        )
    return generator.forward(torch.cat([noise_t, y], dim=1))


def discriminate(discriminator: ModelHandle, x) -> torch.Tensor:
    """Per-row probability that x is real, clamped inside (0, 1)."""
    return discriminator.forward(x)


def classify(
    classifier: ModelHandle, x, with_logits: bool = False, with_features: bool = False
) -> PredictionDistribution:
    """Post-softmax class probabilities, optionally with logits/features."""
    xt = classifier.as_tensor(x)
    logits = classifier.forward(xt)
    probs = probs_from_logits(logits)
    features = classifier.module.features(xt) if with_features else None
    return PredictionDistribution(
        probs=probs,
        logits=logits if with_logits else None,
        features=features,
    )
