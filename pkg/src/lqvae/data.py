"""Dataset ingestion: IDX (MNIST/FMNIST) files, a synthetic smooth
image manifold for fast tests, and seeded splitting."""

import os
import struct
from dataclasses import dataclass, field

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(Exception):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) floats in [0, 1]
    labels: np.ndarray  # (N,) ints
    source: str = ""
    split: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DataError("images/labels length mismatch")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DataError("pixel values must lie in [0, 1]")

    def __len__(self):
        return len(self.images)

    @property
    def n_classes(self):
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def subset(self, n, seed=0):
        idx = np.random.default_rng(seed).permutation(len(self))[:n]
        return Dataset(self.images[idx], self.labels[idx], self.source, self.split)


def load_idx(images_path, labels_path):
    """Load an MNIST-format image/label file pair."""
    for p in (images_path, labels_path):
        if not os.path.exists(p):
            raise DataError(f"file not found: {p}")

    with open(images_path, "rb") as f:
        header = f.read(16)
        if len(header) < 16:
            raise DataError(f"truncated IDX image file: {images_path}")
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGES_MAGIC:
            raise DataError(
                f"bad magic 0x{magic:08x} in {images_path} "
                f"(expected image magic 0x{IDX_IMAGES_MAGIC:08x})"
            )
        raw = f.read(count * rows * cols)
        if len(raw) != count * rows * cols:
            raise DataError(f"truncated IDX image file: {images_path}")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(count, 1, rows, cols)

    with open(labels_path, "rb") as f:
        header = f.read(8)
        if len(header) < 8:
            raise DataError(f"truncated IDX label file: {labels_path}")
        magic, lcount = struct.unpack(">II", header)
        if magic != IDX_LABELS_MAGIC:
            raise DataError(
                f"bad magic 0x{magic:08x} in {labels_path} "
                f"(expected label magic 0x{IDX_LABELS_MAGIC:08x})"
            )
        raw = f.read(lcount)
        if len(raw) != lcount:
            raise DataError(f"truncated IDX label file: {labels_path}")
        labels = np.frombuffer(raw, dtype=np.uint8)

    if count != lcount:
        raise DataError(f"image count {count} != label count {lcount}")
    return Dataset(images / 255.0, labels, source=images_path)


def write_idx(dataset, images_path, labels_path):
    """Write a dataset back to IDX files (pixels rescaled to 0..255)."""
    n, c, h, w = dataset.images.shape
    pixels = np.round(dataset.images * 255.0).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def load_idx_dir(directory, split="train"):
    """Load from a directory laid out with the standard MNIST filenames."""
    prefix = "train" if split == "train" else "t10k"
    return load_idx(
        os.path.join(directory, f"{prefix}-images-idx3-ubyte"),
        os.path.join(directory, f"{prefix}-labels-idx1-ubyte"),
    )


def synthetic_manifold(n_samples, image_size=16, n_classes=10, seed=0):
    """Smooth synthetic image manifold with known class structure.

    Each class is a pattern of one or two parallel soft bars at a
    class-specific orientation; per-sample latent factors (center
    offset, thickness, amplitude) vary smoothly, giving a
    low-dimensional manifold embedded in pixel space.  Orientation and
    bar count vary jointly with the label so that neighbouring class
    indices are visually well separated.
    """
    if n_samples < n_classes:
        raise DataError("need at least one sample per class")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, n_classes, size=n_samples)
    n_angles = max((n_classes + 1) // 2, 1)
    angles = np.pi * (labels % n_angles) / n_angles
    double = labels >= n_angles  # second family: twin parallel bars

    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    cx = (image_size - 1) / 2 + rng.uniform(-0.15, 0.15, n_samples) * image_size
    cy = (image_size - 1) / 2 + rng.uniform(-0.15, 0.15, n_samples) * image_size
    thick = rng.uniform(0.06, 0.12, n_samples) * image_size
    amp = rng.uniform(0.75, 1.0, n_samples)

    # perpendicular distance to the class-angled line through the center
    dx = xx[None] - cx[:, None, None]
    dy = yy[None] - cy[:, None, None]
    d = (
        dx * np.sin(angles)[:, None, None] - dy * np.cos(angles)[:, None, None]
    )
    sep = np.where(double, 0.28, 0.0)[:, None, None] * image_size
    t2 = 2 * thick[:, None, None] ** 2
    bars = np.exp(-((np.abs(d) - sep / 2) ** 2) / t2)
    images = np.clip(amp[:, None, None] * bars, 0.0, 1.0)
    return Dataset(images[:, None, :, :], labels, source=f"synthetic(seed={seed})")


def split(dataset, fraction, seed=0):
    """Seeded shuffle into disjoint, exhaustive (train, test) parts."""
    if not 0 < fraction < 1:
        raise DataError("split fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(dataset))
    cut = int(round(fraction * len(dataset)))
    tr, te = idx[:cut], idx[cut:]
    return (
        Dataset(dataset.images[tr], dataset.labels[tr], dataset.source, "train"),
        Dataset(dataset.images[te], dataset.labels[te], dataset.source, "test"),
    )
