"""Accuracy measurement, ablation orchestration, feature export, figures.

Everything here is read-only over models.  The ablation suite mirrors
the loss-ablation table structure: source-only, generated-pairs-only,
plus-weight-anchor, full, and full-without-smoothness, with mean and
standard deviation over seeds.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, fields

import numpy as np
import torch

from .datasets import DomainPair, LabeledDataset
from .model_core import ModelHandle, restore_params
from .models import classify, generate

METRICS_COLUMNS = (
    "epoch",
    "loss_D",
    "loss_G_adv",
    "loss_sem",
    "loss_gen",
    "loss_wreg",
    "loss_clureg",
    "target_accuracy",
    "anchor_distance",
)

ABLATION_VARIANTS: tuple[tuple[str, frozenset[str] | None], ...] = (
    ("source_only", None),
    ("gen_only", frozenset({"no_wreg", "no_clureg"})),
    ("gen_wreg", frozenset({"no_clureg"})),
    ("full", frozenset()),
    ("full_no_smoothness", frozenset({"no_smoothness"})),
)

_EVAL_BATCH = 512


@dataclass(frozen=True)
class MetricsRecord:
    """One scalar log row; written per epoch to the metrics CSV."""

    epoch: int
    loss_D: float
    loss_G_adv: float
    loss_sem: float
    loss_gen: float
    loss_wreg: float
    loss_clureg: float
    target_accuracy: float
    anchor_distance: float

    def __post_init__(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "target_accuracy":
                if not math.isnan(v) and not 0.0 <= v <= 1.0:
                    raise ValueError(f"target_accuracy out of [0, 1]: {v}")
            elif not np.isfinite(v):
                raise ValueError(f"{f.name} is non-finite: {v}")

    def row(self) -> list:
        return [getattr(self, name) for name in METRICS_COLUMNS]


@dataclass(frozen=True)
class AblationRow:
    variant: str
    per_seed: dict[int, float]
    mean: float
    sd: float


def predict_labels(classifier: ModelHandle, inputs: np.ndarray) -> np.ndarray:
    """Argmax class ids, evaluated in memory-bounded batches."""
    out = []
    with torch.no_grad():
        for start in range(0, len(inputs), _EVAL_BATCH):
            probs = classify(classifier, inputs[start : start + _EVAL_BATCH]).probs
            out.append(probs.argmax(dim=1).cpu().numpy())
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(classifier: ModelHandle, data: LabeledDataset) -> float:
    """Fraction of argmax-correct predictions."""
    if len(data) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    predicted = predict_labels(classifier, data.inputs)
    return float(np.mean(predicted == data.labels))


def generation_fidelity(
    generator: ModelHandle,
    classifier: ModelHandle,
    n_per_class: int = 100,
    seed: int = 0,
) -> float:
    """Fraction of generated samples whose conditioning label the
    classifier reproduces; the classify-generated oracle."""
    from .trainer import STREAM_GRID, derived_rng

    k = generator.class_count
    rng = derived_rng(seed, STREAM_GRID)
    labels = np.repeat(np.arange(k), n_per_class)
    noise = rng.uniform(-1.0, 1.0, size=(len(labels), generator.noise_dim))
    with torch.no_grad():
        samples = generate(generator, labels, noise).cpu().numpy()
    predicted = predict_labels(classifier, samples)
    return float(np.mean(predicted == labels))


def run_ablation_suite(
    pair: DomainPair,
    base_cfg,
    seeds: list[int],
    models_cfg=None,
    pretrain_epochs: int = 50,
    pretrain_lr: float = 1e-3,
) -> list[AblationRow]:
    """Adapt the same pre-trained source model under each loss variant.

    Per seed, the source classifier is pre-trained once and every
    variant starts from that anchor with identically initialized G/D.
    """
    from dataclasses import replace

    from .config import ModelsConfig, build_trio
    from .trainer import adapt, init_state, pretrain_source

    models_cfg = models_cfg or ModelsConfig()
    results: dict[str, dict[int, float]] = {name: {} for name, _ in ABLATION_VARIANTS}
    for seed in seeds:
        classifier, _, _ = build_trio(pair, models_cfg, base_cfg.noise_dim, seed)
        anchor = pretrain_source(
            classifier, pair.source, pretrain_epochs, pretrain_lr, seed, base_cfg.batch_size
        )
        results["source_only"][seed] = accuracy(classifier, pair.target)
        for name, ablation in ABLATION_VARIANTS:
            if ablation is None:
                continue
            run_c, run_g, run_d = build_trio(pair, models_cfg, base_cfg.noise_dim, seed)
            restore_params(run_c, anchor)
            cfg = replace(base_cfg, seed=seed, ablation=ablation)
            state = init_state(run_c, run_g, run_d, anchor, cfg)
            adapt(state, pair.target.unlabeled(), cfg)
            results[name][seed] = accuracy(run_c, pair.target)

    rows = []
    for name, _ in ABLATION_VARIANTS:
        per_seed = results[name]
        values = np.array([per_seed[s] for s in seeds], dtype=np.float64)
        rows.append(
            AblationRow(
                variant=name,
                per_seed=dict(per_seed),
                mean=float(values.mean()),
                sd=float(values.std(ddof=1)) if len(values) > 1 else 0.0,
            )
        )
    return rows


def export_features(
    classifier: ModelHandle,
    data: LabeledDataset,
    path: str | os.PathLike,
) -> str:
    """CSV of penultimate features + true/predicted label, plus a 2-D
    principal-direction projection image next to it."""
    feats = []
    with torch.no_grad():
        for start in range(0, len(data), _EVAL_BATCH):
            pred = classify(classifier, data.inputs[start : start + _EVAL_BATCH], with_features=True)
            feats.append(pred.features.cpu().numpy())
    features = np.concatenate(feats, axis=0)
    predicted = predict_labels(classifier, data.inputs)

    path = os.fspath(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([f"f{i}" for i in range(features.shape[1])] + ["label", "pred"])
        for row, lab, pred_lab in zip(features, data.labels, predicted):
            writer.writerow([repr(float(v)) for v in row] + [int(lab), int(pred_lab)])

    image_path = os.path.splitext(path)[0] + ".png"
    projected = principal_projection(features)
    _scatter_png(projected, data.labels, data.class_count, image_path)
    return image_path


def principal_projection(features: np.ndarray) -> np.ndarray:
    """Deterministic top-2 principal-direction projection (sign-fixed)."""
    centered = features.astype(np.float64) - features.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    if comps.shape[0] < 2:
        comps = np.vstack([comps, np.zeros_like(comps[0])])
    for i in range(2):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return centered @ comps.T


def sample_grid(
    generator: ModelHandle,
    rows: int,
    cols: int,
    seed: int,
    path: str | os.PathLike,
    image_shape: tuple[int, int, int] | None = None,
) -> str:
    """Conditional sample sheet: column j is class j, each row shares one
    noise vector.  Images become a mosaic PNG; 2-D data a scatter plot."""
    from .trainer import STREAM_GRID, derived_rng

    if cols > generator.class_count:
        raise ValueError(f"cols {cols} exceeds class count {generator.class_count}")
    rng = derived_rng(seed, STREAM_GRID)
    noise_rows = rng.uniform(-1.0, 1.0, size=(rows, generator.noise_dim))
    labels = np.tile(np.arange(cols), rows)
    noise = np.repeat(noise_rows, cols, axis=0)
    with torch.no_grad():
        samples = generate(generator, labels, noise).cpu().numpy()

    path = os.fspath(path)
    if image_shape is not None:
        _mosaic_png(samples, labels, rows, cols, image_shape, path)
    else:
        _scatter_png(samples, labels, generator.class_count, path)
    return path


def _mosaic_png(
    samples: np.ndarray,
    labels: np.ndarray,
    rows: int,
    cols: int,
    image_shape: tuple[int, int, int],
    path: str,
    pad: int = 2,
) -> None:
    from PIL import Image

    c, h, w = image_shape
    grid = np.zeros((rows * (h + pad) - pad, cols * (w + pad) - pad, 3), dtype=np.uint8)
    imgs = ((samples.reshape(-1, c, h, w) + 1.0) * 127.5).clip(0, 255).astype(np.uint8)
    for i in range(rows):
        for j in range(cols):
            img = imgs[i * cols + j]
            rgb = np.repeat(img, 3, axis=0) if c == 1 else img
            grid[i * (h + pad) : i * (h + pad) + h, j * (w + pad) : j * (w + pad) + w] = (
                rgb.transpose(1, 2, 0)
            )
    Image.fromarray(grid).save(path, format="PNG")


def _scatter_png(points: np.ndarray, labels: np.ndarray, class_count: int, path: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5), dpi=120)
    cmap = plt.get_cmap("tab10")
    for k in range(class_count):
        mask = labels == k
        ax.scatter(points[mask, 0], points[mask, 1], s=8, color=cmap(k % 10), label=str(k))
    ax.legend(loc="best", fontsize=8)
    ax.set_xlabel("dim 0")
    ax.set_ylabel("dim 1")
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
