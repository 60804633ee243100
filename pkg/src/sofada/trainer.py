"""Source pre-training and the alternating D/G/C adaptation loop.

The adaptation side never sees labels: it accepts only unlabeled
batches/datasets, so source data (and target labels) are unreachable by
construction.  Per step the order is fixed: generate, update D, update
G, and - once warm-up has ended - update C against the generated pairs
plus the two regularizers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
import torch

from .datasets import LabeledDataset, UnlabeledBatch, UnlabeledDataset, batches
from .losses import (
    LossWeights,
    clustering_regularizer,
    discriminator_loss,
    generated_sample_loss,
    generator_adversarial_loss,
    semantic_loss,
    weight_regularizer_live,
)
from .model_core import (
    ModelHandle,
    NonFiniteLossError,
    ParamVector,
    param_distance,
    snapshot_params,
    stable_log_softmax,
)
from .models import apply_spectral_norm, classify, discriminate, generate
from .vat import VatConfig

ABLATION_FLAGS = frozenset({"no_gen", "no_wreg", "no_clureg", "no_smoothness"})
WARMUP_MODES = ("fixed", "semantic")
GENERATOR_LOSS_MODES = ("saturating", "nonsaturating")

# Adam moment coefficients: GAN-standard for the adversarial pair.
BETAS_ADVERSARIAL = (0.5, 0.999)
BETAS_CLASSIFIER = (0.9, 0.999)

# Seed-stream tags so independent random streams never collide.
STREAM_INIT = 1
STREAM_PRETRAIN = 2
STREAM_ADAPT = 3
STREAM_GRID = 4


def derived_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng((seed, stream))


@dataclass(frozen=True)
class AdaptConfig:
    """Every tunable of the adaptation run."""

    loss_weights: LossWeights = LossWeights()
    vat: VatConfig = VatConfig()
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

    def __post_init__(self) -> None:
        for name in ("lr_D", "lr_G", "lr_C"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be > 0")
        if self.epochs < 0 or not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError("need 0 <= warmup_epochs <= epochs")
        if self.generator_loss_mode not in GENERATOR_LOSS_MODES:
            raise ValueError(f"generator_loss_mode must be one of {GENERATOR_LOSS_MODES}")
        if self.warmup_mode not in WARMUP_MODES:
            raise ValueError(f"warmup_mode must be one of {WARMUP_MODES}")
        unknown = set(self.ablation) - ABLATION_FLAGS
        if unknown:
            raise ValueError(f"unknown ablation flags {sorted(unknown)}")
        if not all(0.0 < m <= 1.0 for m in self.lr_decay_milestones):
            raise ValueError("lr decay milestones must be fractions in (0, 1]")

    def with_ablation(self, *flags: str) -> "AdaptConfig":
        return replace(self, ablation=frozenset(flags))


@dataclass
class TrainingState:
    """Mutable state of one adaptation run.

    ``anchor`` is the frozen source-classifier snapshot; it never
    changes after pre-training.
    """

    classifier: ModelHandle
    generator: ModelHandle
    discriminator: ModelHandle
    anchor: ParamVector
    opt_C: torch.optim.Adam
    opt_G: torch.optim.Adam
    opt_D: torch.optim.Adam
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0
    adaptation_started: bool = False
    last_semantic_loss: float = math.inf


def init_state(
    classifier: ModelHandle,
    generator: ModelHandle,
    discriminator: ModelHandle,
    anchor: ParamVector,
    cfg: AdaptConfig,
) -> TrainingState:
    return TrainingState(
        classifier=classifier,
        generator=generator,
        discriminator=discriminator,
        anchor=anchor,
        opt_C=torch.optim.Adam(classifier.parameters(), lr=cfg.lr_C, betas=BETAS_CLASSIFIER),
        opt_G=torch.optim.Adam(generator.parameters(), lr=cfg.lr_G, betas=BETAS_ADVERSARIAL),
        opt_D=torch.optim.Adam(discriminator.parameters(), lr=cfg.lr_D, betas=BETAS_ADVERSARIAL),
        rng=derived_rng(cfg.seed, STREAM_ADAPT),
    )


def pretrain_source(
    classifier: ModelHandle,
    source: LabeledDataset,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 64,
) -> ParamVector:
    """Cross-entropy training on labeled source data; returns the anchor.

    This is the only operation allowed to see source data.
    """
    opt = torch.optim.Adam(classifier.parameters(), lr=lr, betas=BETAS_CLASSIFIER)
    for epoch in range(epochs):
        for batch in batches(source, batch_size, shuffle_seed=seed, epoch=epoch):
            logits = classifier.forward(batch.inputs)
            logp = stable_log_softmax(logits)
            idx = torch.as_tensor(batch.labels)
            loss = -logp[torch.arange(len(idx)), idx].mean()
            _check_finite("pretrain cross-entropy", loss)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    return snapshot_params(classifier)


def sample_label_noise(
    batch_size: int, class_count: int, noise_dim: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Uniform class labels and uniform [-1, 1] noise for the generator."""
    labels = rng.integers(0, class_count, size=batch_size)
    noise = rng.uniform(-1.0, 1.0, size=(batch_size, noise_dim))
    return labels, noise


def _check_finite(term: str, loss: torch.Tensor) -> None:
    value = float(loss.detach())
    if not np.isfinite(value):
        raise NonFiniteLossError(f"{term} is non-finite ({value})", value)


def _zero_grads(state: TrainingState) -> None:
    state.opt_C.zero_grad(set_to_none=True)
    state.opt_G.zero_grad(set_to_none=True)
    state.opt_D.zero_grad(set_to_none=True)


def adapt_step(state: TrainingState, x_t: UnlabeledBatch, cfg: AdaptConfig):
    """One alternating update: D, then G, then (past warm-up) C."""
    from .evaluation import MetricsRecord  # deferred: evaluation builds on trainer

    weights = cfg.loss_weights
    batch = len(x_t.inputs)
    class_count = state.classifier.class_count
    labels, noise = sample_label_noise(batch, class_count, cfg.noise_dim, state.rng)

    apply_spectral_norm(state.discriminator)
    with torch.no_grad():
        x_g = generate(state.generator, labels, noise)

    # Discriminator: real target batch vs detached generated batch.
    d_real = discriminate(state.discriminator, x_t.inputs)
    d_fake = discriminate(state.discriminator, x_g)
    loss_d = discriminator_loss(d_real, d_fake)
    _check_finite("discriminator loss", loss_d)
    _zero_grads(state)
    loss_d.backward()
    state.opt_D.step()

    # Generator: fool the updated D while matching the conditioning label
    # under the (frozen) classifier.
    x_g_live = generate(state.generator, labels, noise)
    loss_adv = generator_adversarial_loss(
        discriminate(state.discriminator, x_g_live), cfg.generator_loss_mode
    )
    loss_sem = semantic_loss(classify(state.classifier, x_g_live).probs, labels)
    loss_g = loss_adv + weights.lambda_s * loss_sem
    _check_finite("generator adversarial loss", loss_adv)
    _check_finite("generator semantic loss", loss_sem)
    _zero_grads(state)
    loss_g.backward()
    state.opt_G.step()

    # Classifier: generated pairs plus anchor and clustering regularizers.
    loss_gen_v = loss_wreg_v = loss_clu_v = 0.0
    if state.adaptation_started:
        total = None
        if "no_gen" not in cfg.ablation:
            loss_gen = generated_sample_loss(classify(state.classifier, x_g).probs, labels)
            _check_finite("generated-sample loss", loss_gen)
            loss_gen_v = float(loss_gen.detach())
            total = weights.lambda_g * loss_gen
        if "no_wreg" not in cfg.ablation:
            loss_wreg = weight_regularizer_live(state.classifier, state.anchor)
            _check_finite("weight regularizer", loss_wreg)
            loss_wreg_v = float(loss_wreg.detach())
            term = weights.lambda_w * loss_wreg
            total = term if total is None else total + term
        if "no_clureg" not in cfg.ablation:
            loss_clu = clustering_regularizer(
                state.classifier,
                x_t,
                xi=cfg.vat.xi,
                power_iters=cfg.vat.power_iters,
                fd_step=cfg.vat.fd_step,
                rng=state.rng,
                include_smoothness="no_smoothness" not in cfg.ablation,
            )
            _check_finite("clustering regularizer", loss_clu)
            loss_clu_v = float(loss_clu.detach())
            term = weights.lambda_clu * loss_clu
            total = term if total is None else total + term
        if total is not None:
            _zero_grads(state)
            total.backward()
            state.opt_C.step()

    state.step += 1
    return MetricsRecord(
        epoch=state.epoch,
        loss_D=float(loss_d.detach()),
        loss_G_adv=float(loss_adv.detach()),
        loss_sem=float(loss_sem.detach()),
        loss_gen=loss_gen_v,
        loss_wreg=loss_wreg_v,
        loss_clureg=loss_clu_v,
        target_accuracy=math.nan,
        anchor_distance=param_distance(snapshot_params(state.classifier), state.anchor),
    )


def lr_at_epoch(cfg: AdaptConfig, epoch: int) -> float:
    """Classifier learning rate under the x0.1 milestone schedule."""
    decays = sum(1 for m in cfg.lr_decay_milestones if epoch >= int(m * cfg.epochs))
    return cfg.lr_C * (0.1**decays)


def _maybe_start_adaptation(state: TrainingState, cfg: AdaptConfig, class_count: int) -> None:
    if state.adaptation_started:
        return
    if state.epoch >= cfg.warmup_epochs:
        state.adaptation_started = True
    elif (
        cfg.warmup_mode == "semantic"
        and state.last_semantic_loss < math.log(class_count) / 2.0
    ):
        state.adaptation_started = True


def adapt(
    state: TrainingState,
    target: UnlabeledDataset,
    cfg: AdaptConfig,
    eval_fn: Callable[[ModelHandle], float] | None = None,
    on_epoch_end: Callable[[TrainingState, object], None] | None = None,
):
    """Run the adaptation epochs over shuffled target batches.

    Returns (classifier, per-epoch metrics).  ``eval_fn`` supplies the
    target accuracy column and must come from the evaluation side; the
    trainer itself never touches labels.
    """
    from .evaluation import MetricsRecord  # deferred: evaluation builds on trainer

    if isinstance(target, LabeledDataset):
        raise TypeError("adapt() accepts only unlabeled datasets; pass dataset.unlabeled()")

    history: list[MetricsRecord] = []
    for epoch in range(state.epoch, cfg.epochs):
        state.epoch = epoch
        _maybe_start_adaptation(state, cfg, state.classifier.class_count)
        lr_now = lr_at_epoch(cfg, epoch)
        for group in state.opt_C.param_groups:
            group["lr"] = lr_now

        step_records = [
            adapt_step(state, batch, cfg)
            for batch in batches(target, cfg.batch_size, shuffle_seed=cfg.seed, epoch=epoch)
        ]
        state.last_semantic_loss = float(
            np.mean([r.loss_sem for r in step_records]) if step_records else math.inf
        )
        record = MetricsRecord(
            epoch=epoch,
            loss_D=float(np.mean([r.loss_D for r in step_records])),
            loss_G_adv=float(np.mean([r.loss_G_adv for r in step_records])),
            loss_sem=state.last_semantic_loss,
            loss_gen=float(np.mean([r.loss_gen for r in step_records])),
            loss_wreg=float(np.mean([r.loss_wreg for r in step_records])),
            loss_clureg=float(np.mean([r.loss_clureg for r in step_records])),
            target_accuracy=(eval_fn(state.classifier) if eval_fn else math.nan),
            anchor_distance=param_distance(snapshot_params(state.classifier), state.anchor),
        )
        history.append(record)
        state.epoch = epoch + 1
        if on_epoch_end is not None:
            on_epoch_end(state, record)
    return state.classifier, history
