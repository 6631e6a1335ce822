"""Dataset ingestion: MNIST IDX files, sklearn's bundled digits, synthetic blobs."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fp8emu.nn.train import Dataset
from fp8emu.rng import RngStream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    pass


def _read_idx(path, magic: int) -> tuple[tuple[int, ...], bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataError(f"{path}: truncated header at offset 0")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise DataError(f"{path}: bad magic 0x{found:08X} at offset 0 (expected 0x{magic:08X})")
    ndim = magic & 0xFF
    end = 4 + 4 * ndim
    if len(raw) < end:
        raise DataError(f"{path}: truncated dimension table at offset 4")
    dims = struct.unpack(f">{ndim}I", raw[4:end])
    need = int(np.prod(dims))
    if len(raw) - end < need:
        raise DataError(f"{path}: truncated data at offset {len(raw)} "
                        f"(need {need} bytes after offset {end})")
    return dims, raw[end:end + need]


def read_idx_images(path) -> np.ndarray:
    dims, data = _read_idx(path, IDX_IMAGES_MAGIC)
    return np.frombuffer(data, dtype=np.uint8).reshape(dims)


def read_idx_labels(path) -> np.ndarray:
    dims, data = _read_idx(path, IDX_LABELS_MAGIC)
    return np.frombuffer(data, dtype=np.uint8).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as an IDX file (used to build fixtures)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


def load_mnist_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Images scaled to [0, 1] as (n, 1, rows, cols) float64, plus labels."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"image/label count mismatch: {images.shape[0]} vs {labels.shape[0]}")
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    return x, labels.astype(np.int64)


def load_idx_dataset(train_images, train_labels, test_images, test_labels,
                     limit_train: int = 0, limit_test: int = 0) -> Dataset:
    xtr, ytr = load_mnist_idx(train_images, train_labels)
    xte, yte = load_mnist_idx(test_images, test_labels)
    if limit_train:
        xtr, ytr = xtr[:limit_train], ytr[:limit_train]
    if limit_test:
        xte, yte = xte[:limit_test], yte[:limit_test]
    classes = int(max(ytr.max(initial=0), yte.max(initial=0))) + 1
    return Dataset(xtr, ytr, xte, yte, classes, "mnist-idx")


def load_digits(test_fraction: float = 0.2, split_seed: int = 0, upsample: int = 1,
                border: int = 0) -> Dataset:
    """sklearn's 8x8 handwritten digits (1797 images, 17 intensity levels).

    ``upsample`` repeats every pixel into an ``upsample`` x ``upsample`` block
    and ``border`` adds zero padding, so ``upsample=3, border=2`` gives
    MNIST-sized 28x28 images.
    """
    from sklearn.datasets import load_digits as _load

    if upsample < 1 or border < 0:
        raise ValueError("upsample must be >= 1 and border >= 0")
    d = _load()
    x = d.images.astype(np.float64)[:, None, :, :] / 16.0
    if upsample > 1:
        x = x.repeat(upsample, axis=2).repeat(upsample, axis=3)
    if border:
        x = np.pad(x, ((0, 0), (0, 0), (border, border), (border, border)))
    y = d.target.astype(np.int64)
    order = RngStream(split_seed, (0xD161,)).generator().permutation(len(y))
    n_test = int(round(test_fraction * len(y)))
    te, tr = order[:n_test], order[n_test:]
    return Dataset(x[tr], y[tr], x[te], y[te], 10, "digits")


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian blobs: class c is centered at ``separation`` standard
    deviations along axis c."""

    classes: int = 2
    dimension: int = 16
    separation: float = 4.0
    count: int = 1024
    seed: int = 0
    test_fraction: float = 0.25

    def __post_init__(self):
        if self.classes < 2 or self.dimension < self.classes:
            raise ValueError("need classes >= 2 and dimension >= classes")
        if self.count < 2:
            raise ValueError("count must be >= 2")


def load_synthetic(spec: SyntheticSpec) -> Dataset:
    gen = RngStream(spec.seed, (0xB10B,)).generator()
    y = gen.integers(0, spec.classes, size=spec.count)
    centers = np.zeros((spec.classes, spec.dimension))
    centers[np.arange(spec.classes), np.arange(spec.classes)] = spec.separation
    x = centers[y] + gen.normal(size=(spec.count, spec.dimension))
    n_test = int(round(spec.test_fraction * spec.count))
    return Dataset(x[n_test:], y[n_test:], x[:n_test], y[:n_test], spec.classes, "synthetic")
