"""Synthetic domain-shift datasets, small digit loaders and batch iteration.

All generators are pure functions of their seeds.  Inputs are scaled to
[-1, 1] per channel so real data lives in the same range as the tanh
generator output.  Target labels are carried by the dataset objects for
evaluation only; the trainer consumes the unlabeled view.
"""

from __future__ import annotations

import csv
import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DATA_DIR_ENV = "SOFADA_DATA_DIR"

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
}
USPS_FILES = {"train": "usps_train.sfusps"}


@dataclass(frozen=True)
class LabeledBatch:
    inputs: np.ndarray  # B x d
    labels: np.ndarray  # B ints in [0, K)

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("batch inputs must be finite")
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs and labels must have equal length")


@dataclass(frozen=True)
class UnlabeledBatch:
    inputs: np.ndarray  # B x d

    def __post_init__(self) -> None:
        if len(self.inputs) == 0:
            raise ValueError("batch must be non-empty")
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("batch inputs must be finite")


@dataclass(frozen=True)
class LabeledDataset:
    """Flat-feature dataset; ``shape`` remembers any image geometry."""

    inputs: np.ndarray  # N x d
    labels: np.ndarray  # N ints
    class_count: int
    shape: tuple[int, ...] = ()  # per-example shape before flattening, e.g. (1, 16, 16)

    def __post_init__(self) -> None:
        if len(self.labels) and (
            self.labels.min() < 0 or self.labels.max() >= self.class_count
        ):
            raise ValueError("labels out of range for class_count")

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def unlabeled(self) -> "UnlabeledDataset":
        return UnlabeledDataset(self.inputs, self.shape)


@dataclass(frozen=True)
class UnlabeledDataset:
    inputs: np.ndarray
    shape: tuple[int, ...] = ()

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]


@dataclass(frozen=True)
class DomainPair:
    """Source/target datasets under a known shift.

    Target labels are present for evaluation only; pass
    ``pair.target.unlabeled()`` to anything that trains.
    """

    source: LabeledDataset
    target: LabeledDataset
    shift_spec: str
    class_count: int
    dim: int

    def __post_init__(self) -> None:
        if self.source.class_count != self.class_count or self.target.class_count != self.class_count:
            raise ValueError("source and target must share the class count")
        if self.source.dim != self.dim or self.target.dim != self.dim:
            raise ValueError("source and target must share the input dimensionality")


def make_moons_shift(
    n_per_domain: int,
    rotation_deg: float,
    noise_sd: float = 0.1,
    seed: int = 0,
) -> DomainPair:
    """Two interleaved half-circles; target is rotated about the centroid."""
    if n_per_domain < 100:
        raise ValueError(f"n_per_domain must be >= 100, got {n_per_domain}")
    if not 0.0 <= rotation_deg < 180.0:
        raise ValueError(f"rotation_deg must be in [0, 180), got {rotation_deg}")

    def sample(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        n_a = n_per_domain // 2
        n_b = n_per_domain - n_a
        t_a = rng.uniform(0.0, np.pi, n_a)
        t_b = rng.uniform(0.0, np.pi, n_b)
        upper = np.stack([np.cos(t_a), np.sin(t_a)], axis=1)
        lower = np.stack([1.0 - np.cos(t_b), -np.sin(t_b) + 0.5], axis=1)
        x = np.concatenate([upper, lower], axis=0)
        y = np.concatenate([np.zeros(n_a, dtype=np.int64), np.ones(n_b, dtype=np.int64)])
        x = x + rng.normal(0.0, noise_sd, size=x.shape)
        order = rng.permutation(len(x))
        return x[order], y[order]

    rng = np.random.default_rng(seed)
    xs, ys = sample(rng)
    xt, yt = sample(rng)
    theta = np.deg2rad(rotation_deg)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    centroid = xt.mean(axis=0)
    xt = (xt - centroid) @ rot.T + centroid

    scale = max(np.abs(xs).max(), np.abs(xt).max())
    xs = (xs / scale).astype(np.float32)
    xt = (xt / scale).astype(np.float32)
    return DomainPair(
        source=LabeledDataset(xs, ys, class_count=2),
        target=LabeledDataset(xt, yt, class_count=2),
        shift_spec=f"moons rotated {rotation_deg} deg, noise {noise_sd}",
        class_count=2,
        dim=2,
    )


def make_blobs_shift(
    class_count: int,
    n_per_class: int,
    mean_shift: tuple[float, float] | np.ndarray,
    cluster_sd: float = 1.0,
    separation: float = 6.0,
    seed: int = 0,
) -> DomainPair:
    """K isotropic Gaussian clusters on a circle; target translated per cluster.

    ``mean_shift`` is applied to every cluster mean, in units of
    ``cluster_sd`` before rescaling.
    """
    if class_count < 2:
        raise ValueError(f"class_count must be >= 2, got {class_count}")
    rng = np.random.default_rng(seed)
    angles = 2.0 * np.pi * np.arange(class_count) / class_count
    radius = separation * cluster_sd / max(2.0 * np.sin(np.pi / class_count), 1e-9)
    centers = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    shift = np.asarray(mean_shift, dtype=np.float64) * cluster_sd

    def sample(rng: np.random.Generator, offset: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        xs, ys = [], []
        for k in range(class_count):
            pts = rng.normal(0.0, cluster_sd, size=(n_per_class, 2)) + centers[k] + offset
            xs.append(pts)
            ys.append(np.full(n_per_class, k, dtype=np.int64))
        x = np.concatenate(xs, axis=0)
        y = np.concatenate(ys, axis=0)
        order = rng.permutation(len(x))
        return x[order], y[order]

    xs, ys = sample(rng, np.zeros(2))
    xt, yt = sample(rng, shift)
    scale = max(np.abs(xs).max(), np.abs(xt).max())
    xs = (xs / scale).astype(np.float32)
    xt = (xt / scale).astype(np.float32)
    return DomainPair(
        source=LabeledDataset(xs, ys, class_count=class_count),
        target=LabeledDataset(xt, yt, class_count=class_count),
        shift_spec=f"{class_count} blobs shifted {np.asarray(mean_shift).tolist()} sd",
        class_count=class_count,
        dim=2,
    )


# ---------------------------------------------------------------------------
# Digit data


def _read_idx(path: Path) -> np.ndarray:
    """Read an IDX file (the standard MNIST container), gzipped or raw."""
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        zero, dtype_code, ndim = struct.unpack(">HBB", f.read(4))
        if zero != 0:
            raise ValueError(f"{path}: not an IDX file (bad magic)")
        dtypes = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
        if dtype_code not in dtypes:
            raise ValueError(f"{path}: unsupported IDX dtype 0x{dtype_code:02x}")
        dims = struct.unpack(f">{ndim}I", f.read(4 * ndim))
        data = np.frombuffer(f.read(), dtype=dtypes[dtype_code])
    return data.reshape(dims)


def _read_usps_raw(path: Path) -> tuple[np.ndarray, np.ndarray]:
    """Read the toolkit's USPS container (see README for the byte layout).

    Layout: magic b"USPS", uint32 LE count, uint32 LE side, then per image
    one uint8 label followed by side*side uint16 LE pixels in [0, 65535].
    """
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != b"USPS":
            raise ValueError(f"{path}: bad magic {magic!r}, expected b'USPS'")
        count, side = struct.unpack("<II", f.read(8))
        images = np.empty((count, side, side), dtype=np.float64)
        labels = np.empty(count, dtype=np.int64)
        rec = struct.Struct(f"<B{side * side}H")
        for i in range(count):
            fields = rec.unpack(f.read(rec.size))
            labels[i] = fields[0]
            images[i] = np.asarray(fields[1:], dtype=np.float64).reshape(side, side)
    return images / 65535.0, labels


def write_usps_raw(path: Path, images: np.ndarray, labels: np.ndarray) -> None:
    """Inverse of the USPS reader; used to prepare data files and in tests."""
    images = np.asarray(images, dtype=np.float64)
    count, side = images.shape[0], images.shape[1]
    with open(path, "wb") as f:
        f.write(b"USPS")
        f.write(struct.pack("<II", count, side))
        rec = struct.Struct(f"<B{side * side}H")
        for img, lab in zip(images, labels):
            pix = np.clip(np.round(img * 65535.0), 0, 65535).astype(np.uint16)
            f.write(rec.pack(int(lab), *pix.reshape(-1).tolist()))


def _resize_images(images: np.ndarray, side: int) -> np.ndarray:
    """Bilinear resize of N x H x W float images to N x side x side."""
    n, h, w = images.shape
    if (h, w) == (side, side):
        return images
    ys = (np.arange(side) + 0.5) * h / side - 0.5
    xs = (np.arange(side) + 0.5) * w / side - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    top = images[:, y0][:, :, x0] * (1 - wx) + images[:, y0][:, :, x1] * wx
    bot = images[:, y1][:, :, x0] * (1 - wx) + images[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def _class_balanced_subsample(
    labels: np.ndarray, max_total: int, class_count: int, rng: np.random.Generator
) -> np.ndarray:
    """Indices of a class-balanced subsample; per-class counts differ by <= 1."""
    max_total = min(max_total, len(labels))
    base, extra = divmod(max_total, class_count)
    per_class = np.full(class_count, base, dtype=int)
    per_class[rng.permutation(class_count)[:extra]] += 1
    picked = []
    for k in range(class_count):
        idx = np.flatnonzero(labels == k)
        take = min(per_class[k], len(idx))
        picked.append(rng.permutation(idx)[:take])
    out = np.concatenate(picked)
    return out[rng.permutation(len(out))]


def _colorize_mnistm_lite(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Blend grayscale digits with smooth random color fields (3 channels).

    Stands in for the color-texture shift of the usual blended-background
    digit domain without shipping external image crops.
    """
    n, side, _ = images.shape
    coarse = rng.uniform(0.0, 1.0, size=(n, 3, 4, 4))
    fields = np.stack(
        [_resize_images(coarse[:, c], side) for c in range(3)], axis=1
    )  # N x 3 x side x side
    digits = images[:, None, :, :]
    # Invert the background color wherever the digit stroke is present.
    return np.abs(fields - digits)


def load_digit_pair(
    name: str,
    max_per_domain: int = 5000,
    image_side: int = 16,
    seed: int = 0,
    data_dir: str | os.PathLike | None = None,
) -> DomainPair:
    """Small image domain pair, class-balanced and rescaled to [-1, 1].

    ``mnist_to_usps`` needs MNIST IDX files and a USPS container in the
    data directory; ``mnist_to_mnistm_lite`` needs only MNIST and
    synthesizes the color-shifted domain locally.
    """
    if name not in ("mnist_to_usps", "mnist_to_mnistm_lite"):
        raise ValueError(f"unknown digit pair {name!r}")
    root = Path(data_dir) if data_dir is not None else Path(os.environ.get(DATA_DIR_ENV, "data"))
    rng = np.random.default_rng(seed)

    def require(fname: str) -> Path:
        for candidate in (root / fname, root / (fname + ".gz")):
            if candidate.exists():
                return candidate
        raise FileNotFoundError(
            f"digit data file not found: expected {root / fname} (or .gz); "
            f"set the data directory via config or ${DATA_DIR_ENV}"
        )

    mnist_images = _read_idx(require(MNIST_FILES["train_images"])).astype(np.float64) / 255.0
    mnist_labels = _read_idx(require(MNIST_FILES["train_labels"])).astype(np.int64)

    src_idx = _class_balanced_subsample(mnist_labels, max_per_domain, 10, rng)
    src_images = _resize_images(mnist_images[src_idx], image_side)
    src_labels = mnist_labels[src_idx]

    if name == "mnist_to_usps":
        usps_images, usps_labels = _read_usps_raw(require(USPS_FILES["train"]))
        tgt_idx = _class_balanced_subsample(usps_labels, max_per_domain, 10, rng)
        tgt_images = _resize_images(usps_images[tgt_idx], image_side)
        tgt_labels = usps_labels[tgt_idx]
        channels = 1
        src_stack = src_images[:, None, :, :]
        tgt_stack = tgt_images[:, None, :, :]
    else:
        tgt_idx = _class_balanced_subsample(mnist_labels, max_per_domain, 10, rng)
        tgt_gray = _resize_images(mnist_images[tgt_idx], image_side)
        tgt_labels = mnist_labels[tgt_idx]
        channels = 3
        src_stack = np.repeat(src_images[:, None, :, :], 3, axis=1)
        tgt_stack = _colorize_mnistm_lite(tgt_gray, rng)

    shape = (channels, image_side, image_side)
    dim = channels * image_side * image_side

    def finish(stack: np.ndarray, labels: np.ndarray) -> LabeledDataset:
        flat = (stack.reshape(len(stack), dim) * 2.0 - 1.0).astype(np.float32)
        return LabeledDataset(flat, labels, class_count=10, shape=shape)

    return DomainPair(
        source=finish(src_stack, src_labels),
        target=finish(tgt_stack, tgt_labels),
        shift_spec=name,
        class_count=10,
        dim=dim,
    )


# ---------------------------------------------------------------------------
# Batch iteration and serialization


def batches(dataset, batch_size: int, shuffle_seed: int, epoch: int = 0):
    """Shuffled batches for one epoch; the short final batch is dropped.

    Order is a pure function of (shuffle_seed, epoch).  Dropping the
    remainder keeps real/fake batch sizes equal in the adversarial losses.
    """
    n = len(dataset)
    if batch_size > n:
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {n}")
    order = np.random.default_rng((shuffle_seed, epoch)).permutation(n)
    labeled = isinstance(dataset, LabeledDataset)
    for start in range(0, n - batch_size + 1, batch_size):
        idx = order[start : start + batch_size]
        if labeled:
            yield LabeledBatch(dataset.inputs[idx], dataset.labels[idx])
        else:
            yield UnlabeledBatch(dataset.inputs[idx])


def batches_per_epoch(dataset_size: int, batch_size: int) -> int:
    return dataset_size // batch_size


def save_pair_csv(pair: DomainPair, path: str | os.PathLike) -> None:
    """Write both domains to one CSV: x0..x{d-1},label,domain."""
    d = pair.dim
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([f"x{i}" for i in range(d)] + ["label", "domain"])
        for domain, ds in (("source", pair.source), ("target", pair.target)):
            for row, label in zip(ds.inputs, ds.labels):
                writer.writerow([repr(float(v)) for v in row] + [int(label), domain])


def load_pair_csv(path: str | os.PathLike, class_count: int) -> DomainPair:
    """Read a CSV written by ``save_pair_csv``."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        d = len(header) - 2
        rows = {"source": ([], []), "target": ([], [])}
        for row in reader:
            rows[row[-1]][0].append([float(v) for v in row[:d]])
            rows[row[-1]][1].append(int(row[d]))
    datasets = {
        k: LabeledDataset(
            np.asarray(x, dtype=np.float32), np.asarray(y, dtype=np.int64), class_count
        )
        for k, (x, y) in rows.items()
    }
    return DomainPair(
        source=datasets["source"],
        target=datasets["target"],
        shift_spec=f"loaded from {path}",
        class_count=class_count,
        dim=d,
    )
