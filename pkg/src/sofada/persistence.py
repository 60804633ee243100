"""Checkpoint container and metrics logging.

A checkpoint is one file: an 8-byte magic, a version word, a length-
prefixed JSON manifest (names, shapes, dtypes, offsets, config, rng
state), then the raw little-endian array bytes.  The format is
self-describing and byte-stable, so identical runs produce identical
digests and a saved state resumes training bit-identically.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .evaluation import METRICS_COLUMNS, MetricsRecord
from .model_core import ModelHandle, ParamVector
from .trainer import TrainingState

MAGIC = b"SFADCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable or incompatible checkpoint content."""


@dataclass
class Checkpoint:
    """In-memory image of a checkpoint file."""

    kind: str  # "source" | "adapt"
    config: dict
    arrays: dict[str, np.ndarray]
    epoch: int = 0
    step: int = 0
    adaptation_started: bool = False
    last_semantic_loss: float = math.inf
    rng_state: dict | None = None
    format_version: int = FORMAT_VERSION


def _le_dtype(arr: np.ndarray) -> np.dtype:
    dt = arr.dtype.newbyteorder("<")
    return dt


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(ckpt.arrays):
        arr = np.ascontiguousarray(ckpt.arrays[name])
        arr = arr.astype(_le_dtype(arr), copy=False)
        raw = arr.tobytes()
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": ckpt.kind,
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "adaptation_started": ckpt.adaptation_started,
        # inf (pre-first-epoch sentinel) is not valid JSON; store null.
        "last_semantic_loss": (
            None if not math.isfinite(ckpt.last_semantic_loss) else ckpt.last_semantic_loss
        ),
        "config": ckpt.config,
        "rng_state": ckpt.rng_state,
        "arrays": entries,
    }
    payload = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(payload)))
        f.write(payload)
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        (manifest_len,) = struct.unpack("<Q", f.read(8))
        manifest = json.loads(f.read(manifest_len).decode())
        data = f.read()
    arrays = {}
    for entry in manifest["arrays"]:
        raw = data[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    lsl = manifest.get("last_semantic_loss")
    return Checkpoint(
        kind=manifest["kind"],
        config=manifest["config"],
        arrays=arrays,
        epoch=manifest["epoch"],
        step=manifest["step"],
        adaptation_started=manifest["adaptation_started"],
        last_semantic_loss=math.inf if lsl is None else float(lsl),
        rng_state=manifest["rng_state"],
        format_version=version,
    )


# ---------------------------------------------------------------------------
# Mapping between models/optimizers and named arrays


def _model_arrays(tag: str, model: ModelHandle) -> dict[str, np.ndarray]:
    out = {}
    for name, p in model.module.named_parameters():
        out[f"{tag}.param.{name}"] = p.detach().cpu().numpy().copy()
    for name, b in model.module.named_buffers():
        out[f"{tag}.buffer.{name}"] = b.detach().cpu().numpy().copy()
    return out


def _optimizer_arrays(tag: str, model: ModelHandle, opt: torch.optim.Adam) -> dict[str, np.ndarray]:
    out = {}
    for (name, _), p in zip(model.layer_spec, model.parameters()):
        st = opt.state.get(p)
        if not st:
            continue
        out[f"opt.{tag}.exp_avg.{name}"] = st["exp_avg"].detach().cpu().numpy().copy()
        out[f"opt.{tag}.exp_avg_sq.{name}"] = st["exp_avg_sq"].detach().cpu().numpy().copy()
        step = st["step"]
        step_val = float(step.item()) if isinstance(step, torch.Tensor) else float(step)
        out[f"opt.{tag}.step.{name}"] = np.asarray(step_val, dtype=np.float64)
    return out


def restore_model_arrays(tag: str, model: ModelHandle, arrays: dict[str, np.ndarray]) -> None:
    with torch.no_grad():
        for name, p in model.module.named_parameters():
            key = f"{tag}.param.{name}"
            if key not in arrays:
                raise CheckpointError(f"checkpoint missing array {key!r}")
            if tuple(arrays[key].shape) != tuple(p.shape):
                raise CheckpointError(
                    f"architecture mismatch at {key!r}: checkpoint {arrays[key].shape}, "
                    f"model {tuple(p.shape)}"
                )
            p.copy_(torch.as_tensor(arrays[key], dtype=p.dtype))
        for name, b in model.module.named_buffers():
            key = f"{tag}.buffer.{name}"
            if key in arrays:
                b.copy_(torch.as_tensor(arrays[key], dtype=b.dtype))


def _restore_optimizer(
    tag: str, model: ModelHandle, opt: torch.optim.Adam, arrays: dict[str, np.ndarray]
) -> None:
    for (name, _), p in zip(model.layer_spec, model.parameters()):
        key_avg = f"opt.{tag}.exp_avg.{name}"
        if key_avg not in arrays:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(arrays[f"opt.{tag}.step.{name}"])),
            "exp_avg": torch.as_tensor(arrays[key_avg], dtype=p.dtype).clone(),
            "exp_avg_sq": torch.as_tensor(
                arrays[f"opt.{tag}.exp_avg_sq.{name}"], dtype=p.dtype
            ).clone(),
        }


def source_checkpoint(classifier: ModelHandle, anchor: ParamVector, config: dict) -> Checkpoint:
    arrays = _model_arrays("C", classifier)
    arrays["anchor"] = np.asarray(anchor.values).copy()
    return Checkpoint(kind="source", config=config, arrays=arrays)


def state_checkpoint(state: TrainingState, config: dict) -> Checkpoint:
    arrays: dict[str, np.ndarray] = {}
    arrays.update(_model_arrays("C", state.classifier))
    arrays.update(_model_arrays("G", state.generator))
    arrays.update(_model_arrays("D", state.discriminator))
    arrays.update(_optimizer_arrays("C", state.classifier, state.opt_C))
    arrays.update(_optimizer_arrays("G", state.generator, state.opt_G))
    arrays.update(_optimizer_arrays("D", state.discriminator, state.opt_D))
    arrays["anchor"] = np.asarray(state.anchor.values).copy()
    return Checkpoint(
        kind="adapt",
        config=config,
        arrays=arrays,
        epoch=state.epoch,
        step=state.step,
        adaptation_started=state.adaptation_started,
        last_semantic_loss=state.last_semantic_loss,
        rng_state=state.rng.bit_generator.state,
    )


def restore_classifier(ckpt: Checkpoint, classifier: ModelHandle) -> ParamVector:
    """Load classifier parameters and the anchor from a checkpoint."""
    restore_model_arrays("C", classifier, ckpt.arrays)
    if "anchor" not in ckpt.arrays:
        raise CheckpointError("checkpoint has no anchor array")
    anchor = ParamVector(ckpt.arrays["anchor"].copy(), classifier.layer_spec)
    return anchor


def restore_state(ckpt: Checkpoint, state: TrainingState) -> None:
    """Load a full adaptation state (params, buffers, moments, rng, epoch)."""
    if ckpt.kind != "adapt":
        raise CheckpointError(f"expected an adapt checkpoint, got kind {ckpt.kind!r}")
    restore_model_arrays("C", state.classifier, ckpt.arrays)
    restore_model_arrays("G", state.generator, ckpt.arrays)
    restore_model_arrays("D", state.discriminator, ckpt.arrays)
    _restore_optimizer("C", state.classifier, state.opt_C, ckpt.arrays)
    _restore_optimizer("G", state.generator, state.opt_G, ckpt.arrays)
    _restore_optimizer("D", state.discriminator, state.opt_D, ckpt.arrays)
    state.anchor = ParamVector(ckpt.arrays["anchor"].copy(), state.classifier.layer_spec)
    state.epoch = ckpt.epoch
    state.step = ckpt.step
    state.adaptation_started = ckpt.adaptation_started
    state.last_semantic_loss = ckpt.last_semantic_loss
    if ckpt.rng_state is not None:
        state.rng.bit_generator.state = ckpt.rng_state


# ---------------------------------------------------------------------------
# Metrics CSV


def write_metrics_csv(path: str | os.PathLike, records: list[MetricsRecord]) -> None:
    """One row per record, columns in the frozen documented order."""
    with open(path, "w", newline="") as f:
        f.write(",".join(METRICS_COLUMNS) + "\n")
        for rec in records:
            values = rec.row()
            f.write(",".join(_format(v) for v in values) + "\n")


def read_metrics_csv(path: str | os.PathLike) -> list[MetricsRecord]:
    with open(path) as f:
        header = f.readline().strip().split(",")
        if tuple(header) != METRICS_COLUMNS:
            raise ValueError(f"{path}: unexpected metrics header {header}")
        records = []
        for line in f:
            parts = line.strip().split(",")
            records.append(
                MetricsRecord(
                    epoch=int(parts[0]), **{k: float(v) for k, v in zip(header[1:], parts[1:])}
                )
            )
    return records


def _format(v) -> str:
    if isinstance(v, int):
        return str(v)
    return repr(float(v))
