"""Run configuration: strict file schema and object builders.

The config file is YAML with one section per subsystem.  Parsing is
strict - an unknown section or key is an error naming the offending
path - because a silently ignored hyperparameter typo is the classic
irreproducibility bug.
"""

from __future__ import annotations

import os
import types
import typing
from dataclasses import dataclass, fields
from pathlib import Path

import torch
import yaml

from .datasets import DomainPair, load_digit_pair, make_blobs_shift, make_moons_shift
from .losses import LossWeights
from .model_core import ModelHandle
from .models import (
    ClassifierSpec,
    DiscriminatorSpec,
    GeneratorSpec,
    build_classifier,
    build_discriminator,
    build_generator,
)
from .trainer import STREAM_INIT, AdaptConfig, derived_rng
from .vat import VatConfig


class ConfigError(ValueError):
    """Invalid or unknown configuration content; ``key`` is the dotted path."""

    def __init__(self, message: str, key: str = ""):
        super().__init__(message)
        self.key = key


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "moons"  # moons | blobs | digits
    seed: int = 7
    # moons
    n_per_domain: int = 1000
    rotation_deg: float = 35.0
    noise_sd: float = 0.1
    # blobs
    class_count: int = 3
    n_per_class: int = 400
    mean_shift: tuple[float, float] = (2.0, 0.0)
    cluster_sd: float = 1.0
    separation: float = 6.0
    # digits
    name: str = "mnist_to_usps"
    max_per_domain: int = 5000
    image_side: int = 16
    data_dir: str | None = None


@dataclass(frozen=True)
class ModelsConfig:
    hidden_widths: tuple[int, ...] = (128, 64)
    classifier_channels: tuple[int, ...] = (32, 64, 128)
    discriminator_channels: tuple[int, ...] = (16, 32, 64)
    generator_base_channels: int = 64
    spectral_norm_iters: int = 1
    dtype: str = "float32"


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 64


@dataclass(frozen=True)
class TrainerSection:
    lr_D: float = 4e-4
    lr_G: float = 1e-4
    lr_C: float = 1e-3
    lr_decay_milestones: tuple[float, ...] = (0.5,)
    epochs: int = 40
    batch_size: int = 64
    warmup_epochs: int = 5
    noise_dim: int = 8
    seed: int = 1
    generator_loss_mode: str = "nonsaturating"
    warmup_mode: str = "fixed"
    ablation: frozenset[str] = frozenset()
    ablation_seeds: tuple[int, ...] = (1, 2, 3)


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "runs/out"
    checkpoint_every: int = 0  # epochs between rolling checkpoints; 0 = final only


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetConfig = DatasetConfig()
    models: ModelsConfig = ModelsConfig()
    pretrain: PretrainConfig = PretrainConfig()
    losses: LossWeights = LossWeights()
    vat: VatConfig = VatConfig()
    trainer: TrainerSection = TrainerSection()
    output: OutputConfig = OutputConfig()

    def adapt_config(self, seed: int | None = None) -> AdaptConfig:
        t = self.trainer
        return AdaptConfig(
            loss_weights=self.losses,
            vat=self.vat,
            lr_D=t.lr_D,
            lr_G=t.lr_G,
            lr_C=t.lr_C,
            lr_decay_milestones=t.lr_decay_milestones,
            epochs=t.epochs,
            batch_size=t.batch_size,
            warmup_epochs=t.warmup_epochs,
            noise_dim=t.noise_dim,
            seed=t.seed if seed is None else seed,
            generator_loss_mode=t.generator_loss_mode,
            warmup_mode=t.warmup_mode,
            ablation=t.ablation,
        )

    def to_dict(self) -> dict:
        out: dict = {}
        for section_field in fields(self):
            section = getattr(self, section_field.name)
            sec: dict = {}
            for f in fields(section):
                v = getattr(section, f.name)
                if isinstance(v, tuple):
                    v = list(v)
                elif isinstance(v, frozenset):
                    v = sorted(v)
                sec[f.name] = v
            out[section_field.name] = sec
        return out


_SECTIONS = {
    "dataset": DatasetConfig,
    "models": ModelsConfig,
    "pretrain": PretrainConfig,
    "losses": LossWeights,
    "vat": VatConfig,
    "trainer": TrainerSection,
    "output": OutputConfig,
}


def _cast(value, hint, path: str):
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return None
        return _cast(value, args[0], path)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected bool, got {value!r}", path)
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected int, got {value!r}", path)
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected number, got {value!r}", path)
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected string, got {value!r}", path)
        return value
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected list, got {value!r}", path)
        args = typing.get_args(hint)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_cast(v, args[0], f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{path}: expected {len(args)} items, got {len(value)}", path)
        return tuple(_cast(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if origin is frozenset:
        if not isinstance(value, (list, tuple, set)):
            raise ConfigError(f"{path}: expected list, got {value!r}", path)
        (arg,) = typing.get_args(hint)
        return frozenset(_cast(v, arg, f"{path}[{i}]") for i, v in enumerate(value))
    raise ConfigError(f"{path}: unsupported config field type {hint!r}", path)


def _build_section(cls, data: dict, section: str):
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        key = f"{section}.{sorted(unknown)[0]}"
        raise ConfigError(f"unknown config key {key!r}", key)
    kwargs = {
        name: _cast(value, hints[name], f"{section}.{name}") for name, value in data.items()
    }
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{section}: {exc}", section) from exc


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping of sections")
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"unknown config section {key!r}", key)
    sections = {}
    for name, cls in _SECTIONS.items():
        raw = data.get(name, {})
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError(f"section {name!r} must be a mapping", name)
        sections[name] = _build_section(cls, raw, name)
    return RunConfig(**sections)


def load_config(path: str | os.PathLike) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path) as f:
        data = yaml.safe_load(f) or {}
    return config_from_dict(data)


# ---------------------------------------------------------------------------
# Builders


def build_pair(cfg: DatasetConfig) -> DomainPair:
    if cfg.kind == "moons":
        return make_moons_shift(cfg.n_per_domain, cfg.rotation_deg, cfg.noise_sd, cfg.seed)
    if cfg.kind == "blobs":
        return make_blobs_shift(
            cfg.class_count,
            cfg.n_per_class,
            cfg.mean_shift,
            cluster_sd=cfg.cluster_sd,
            separation=cfg.separation,
            seed=cfg.seed,
        )
    if cfg.kind == "digits":
        return load_digit_pair(
            cfg.name, cfg.max_per_domain, cfg.image_side, cfg.seed, cfg.data_dir
        )
    raise ConfigError(f"dataset.kind: unknown kind {cfg.kind!r}", "dataset.kind")


def torch_dtype(name: str) -> torch.dtype:
    table = {"float32": torch.float32, "float64": torch.float64}
    if name not in table:
        raise ConfigError(f"models.dtype: unknown dtype {name!r}", "models.dtype")
    return table[name]


@dataclass(frozen=True)
class PairGeometry:
    """Shape facts needed to rebuild models without the data files."""

    dim: int
    class_count: int
    image_shape: tuple[int, int, int] | None = None

    @classmethod
    def of(cls, pair: DomainPair) -> "PairGeometry":
        return cls(pair.dim, pair.class_count, pair.source.shape or None)

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "class_count": self.class_count,
            "image_shape": list(self.image_shape) if self.image_shape else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PairGeometry":
        shape = d.get("image_shape")
        return cls(d["dim"], d["class_count"], tuple(shape) if shape else None)


def build_trio(
    geom: PairGeometry | DomainPair,
    models_cfg: ModelsConfig,
    noise_dim: int,
    seed: int,
) -> tuple[ModelHandle, ModelHandle, ModelHandle]:
    """Freshly initialized (classifier, generator, discriminator)."""
    if isinstance(geom, DomainPair):
        geom = PairGeometry.of(geom)
    rng = derived_rng(seed, STREAM_INIT)
    dtype = torch_dtype(models_cfg.dtype)
    classifier = build_classifier(
        ClassifierSpec(
            input_dim=geom.dim,
            class_count=geom.class_count,
            hidden_widths=models_cfg.hidden_widths,
            image_shape=geom.image_shape,
            channels=models_cfg.classifier_channels,
        ),
        rng,
        dtype,
    )
    generator = build_generator(
        GeneratorSpec(
            noise_dim=noise_dim,
            class_count=geom.class_count,
            output_dim=geom.dim,
            hidden_widths=models_cfg.hidden_widths,
            image_shape=geom.image_shape,
            base_channels=models_cfg.generator_base_channels,
        ),
        rng,
        dtype,
    )
    discriminator = build_discriminator(
        DiscriminatorSpec(
            input_dim=geom.dim,
            hidden_widths=models_cfg.hidden_widths,
            spectral_norm_iters=models_cfg.spectral_norm_iters,
            image_shape=geom.image_shape,
            channels=models_cfg.discriminator_channels,
        ),
        rng,
        dtype,
    )
    return classifier, generator, discriminator
