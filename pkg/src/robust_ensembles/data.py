"""Datasets: two-moons and Gaussian blobs generators, IDX (MNIST) reading and writing, splits."""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field

import numpy as np

from .numstats import RngStream, sample_gaussian

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    def __init__(self, kind: str, path, offset: int, detail: str):
        self.kind = kind
        self.offset = offset
        super().__init__(f"{kind} in {path} at byte offset {offset}: {detail}")


class BadMagicError(IdxFormatError):
    def __init__(self, path, offset, detail):
        super().__init__("bad magic number", path, offset, detail)


class TruncatedFileError(IdxFormatError):
    def __init__(self, path, offset, detail):
        super().__init__("truncated file", path, offset, detail)


class CountMismatchError(IdxFormatError):
    def __init__(self, path, offset, detail):
        super().__init__("count mismatch", path, offset, detail)


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    shift: np.ndarray | None = None
    scale: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ValueError("features must be an n x d matrix with one label per row")
        if len(self.labels) < 1:
            raise ValueError("a dataset needs at least one item")
        if np.any(self.labels < 0) or np.any(self.labels >= self.num_classes):
            raise ValueError("labels must lie in [0, C)")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes, self.shift, self.scale,
                       dict(self.meta))


def gen_two_moons(n: int, noise_std: float = 0.1, seed: int = 0) -> Dataset:
    """Interleaved half circles: (cos t, sin t) and (1 - cos t, 0.5 - sin t), t uniform on [0, pi]."""
    if n < 2 or n % 2:
        raise ValueError("n must be an even number >= 2")
    rng = RngStream(seed)
    half = n // 2
    t = np.linspace(0.0, np.pi, half)
    upper = np.column_stack([np.cos(t), np.sin(t)])
    lower = np.column_stack([1.0 - np.cos(t), 0.5 - np.sin(t)])
    x = np.vstack([upper, lower])
    y = np.repeat([0, 1], half)
    if noise_std > 0:
        x = x + sample_gaussian(rng.fork(0), x.shape, noise_std)
    perm = rng.fork(1).permutation(n)
    return Dataset(x[perm], y[perm], 2, meta={"generator": "two_moons", "noise_std": noise_std})


def gen_blobs(centers, per_center: int, noise_std: float = 1.0, seed: int = 0) -> Dataset:
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    if len(centers) < 2:
        raise ValueError("need at least two centers")
    x = np.repeat(centers, per_center, axis=0)
    y = np.repeat(np.arange(len(centers)), per_center)
    if noise_std > 0:
        x = x + sample_gaussian(RngStream(seed), x.shape, noise_std)
    return Dataset(x, y, len(centers), meta={"generator": "blobs"})


def _read_exact(data: bytes, offset: int, size: int, path, what: str) -> bytes:
    if offset + size > len(data):
        raise TruncatedFileError(path, len(data), f"needed {size} bytes for {what} starting at {offset}")
    return data[offset:offset + size]


def _read_bytes(path) -> bytes:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def read_idx_images(path) -> np.ndarray:
    data = _read_bytes(path)
    (magic,) = struct.unpack(">I", _read_exact(data, 0, 4, path, "magic"))
    if magic != IMAGE_MAGIC:
        raise BadMagicError(path, 0, f"expected 0x{IMAGE_MAGIC:08x}, found 0x{magic:08x}")
    count, rows, cols = struct.unpack(">III", _read_exact(data, 4, 12, path, "dimensions"))
    pixels = _read_exact(data, 16, count * rows * cols, path, "pixels")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(count, rows * cols)


def read_idx_labels(path) -> np.ndarray:
    data = _read_bytes(path)
    (magic,) = struct.unpack(">I", _read_exact(data, 0, 4, path, "magic"))
    if magic != LABEL_MAGIC:
        raise BadMagicError(path, 0, f"expected 0x{LABEL_MAGIC:08x}, found 0x{magic:08x}")
    (count,) = struct.unpack(">I", _read_exact(data, 4, 4, path, "count"))
    return np.frombuffer(_read_exact(data, 8, count, path, "labels"), dtype=np.uint8).copy()


def read_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """IDX image/label pair (optionally gzipped); pixels scaled to [0, 1] by /255."""
    pixels = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(pixels) != len(labels):
        raise CountMismatchError(labels_path, 4, f"{len(pixels)} images but {len(labels)} labels")
    num_classes = max(num_classes, int(labels.max()) + 1) if len(labels) else num_classes
    return Dataset(pixels.astype(float) / 255.0, labels.astype(int), num_classes,
                   meta={"source": str(images_path)})


def write_idx(dataset: Dataset, images_path, labels_path, rows: int | None = None, cols: int | None = None):
    """Write features (expected in [0, 1]) quantized to bytes, and labels."""
    d = dataset.dim
    if rows is None or cols is None:
        side = int(round(np.sqrt(d)))
        rows, cols = (side, side) if side * side == d else (1, d)
    pix = np.clip(np.rint(dataset.features * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, len(dataset), rows, cols))
        fh.write(pix.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, len(dataset)))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


def split_and_subsample(dataset: Dataset, train_fraction: float, max_n: int | None = None,
                        stride: int = 1, seed: int = 0, shuffle: bool = True):
    """Seeded shuffle, optional cap on total size, then a train/test split; the
    test part keeps every `stride`-th item."""
    if not (0.0 <= train_fraction <= 1.0):
        raise ValueError("train_fraction must lie in [0, 1]")
    if stride < 1:
        raise ValueError("stride must be positive")
    perm = RngStream(seed).permutation(len(dataset)) if shuffle else np.arange(len(dataset))
    if max_n is not None:
        perm = perm[:max_n]
    n_train = int(round(train_fraction * len(perm)))
    train_idx = perm[:n_train]
    test_idx = perm[n_train:][::stride]
    if len(train_idx) == 0 and train_fraction > 0:
        raise ValueError("empty training split")
    train = dataset.subset(train_idx) if len(train_idx) else None
    test = dataset.subset(test_idx) if len(test_idx) else None
    return train, test


def write_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(dataset.dim)] + ["label"])
        for x, y in zip(dataset.features, dataset.labels):
            w.writerow([format(v, ".17g") for v in x] + [int(y)])
