"""Source-free domain adaptation toolkit.

Adapts a pre-trained classifier to an unlabeled target domain by
training a class-conditional generator/discriminator pair against the
target data and feeding the generated labeled samples back to the
classifier, stabilized by a weight anchor on the source parameters and
an entropy/adversarial-smoothness regularizer.
"""

from .datasets import (
    DomainPair,
    LabeledBatch,
    LabeledDataset,
    UnlabeledBatch,
    UnlabeledDataset,
    batches,
    load_digit_pair,
    make_blobs_shift,
    make_moons_shift,
)
from .losses import (
    LossWeights,
    clustering_regularizer,
    conditional_entropy,
    discriminator_loss,
    generated_sample_loss,
    generator_adversarial_loss,
    kl_divergence,
    semantic_loss,
    weight_regularizer,
)
from .model_core import (
    ModelHandle,
    NonFiniteLossError,
    ParamVector,
    PredictionDistribution,
    ShapeMismatchError,
    grad,
    restore_params,
    snapshot_params,
)
from .models import (
    apply_spectral_norm,
    build_classifier,
    build_discriminator,
    build_generator,
    classify,
    discriminate,
    generate,
)
from .trainer import AdaptConfig, TrainingState, adapt, adapt_step, init_state, pretrain_source
from .vat import VatConfig, find_perturbation

__version__ = "0.1.0"

__all__ = [
    "AdaptConfig",
    "DomainPair",
    "LabeledBatch",
    "LabeledDataset",
    "LossWeights",
    "ModelHandle",
    "NonFiniteLossError",
    "ParamVector",
    "PredictionDistribution",
    "ShapeMismatchError",
    "TrainingState",
    "UnlabeledBatch",
    "UnlabeledDataset",
    "VatConfig",
    "adapt",
    "adapt_step",
    "apply_spectral_norm",
    "batches",
    "build_classifier",
    "build_discriminator",
    "build_generator",
    "classify",
    "clustering_regularizer",
    "conditional_entropy",
    "discriminate",
    "discriminator_loss",
    "find_perturbation",
    "generate",
    "generated_sample_loss",
    "generator_adversarial_loss",
    "grad",
    "init_state",
    "kl_divergence",
    "load_digit_pair",
    "make_blobs_shift",
    "make_moons_shift",
    "pretrain_source",
    "restore_params",
    "semantic_loss",
    "snapshot_params",
    "weight_regularizer",
]
