"""Datasets: synthetic generators, IDX (MNIST container) files, seeded batching."""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigurationError, ConsistencyError, FormatError, InputError

IDX_UBYTE = 0x08
IDX_DOUBLE = 0x0E
IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class TruncatedFileError(OSError):
    """Payload ended before the header's declared size."""


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise InputError(f"{self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InputError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(self.inputs)):
            raise InputError("inputs contain NaN/Inf")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.inputs, "<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels, "<i8").tobytes())
        return h.hexdigest()

    def subset(self, idx) -> Dataset:
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes, self.split)


def _split(x: np.ndarray, y: np.ndarray, classes: int, n_per_class: int) -> tuple[Dataset, Dataset]:
    """80/20 stratified split; both splits interleave classes 0,1,...,C-1,0,1,..."""
    test_pos = [i for i in range(n_per_class) if i % 5 == 4] or [n_per_class - 1]
    train_pos = [i for i in range(n_per_class) if i not in set(test_pos)]
    # x, y are laid out class-major: sample i of class c sits at c * n_per_class + i
    tr = [c * n_per_class + i for i in train_pos for c in range(classes)]
    te = [c * n_per_class + i for i in test_pos for c in range(classes)]
    return (Dataset(x[tr], y[tr], classes, "train"), Dataset(x[te], y[te], classes, "test"))


def gen_synthetic(kind: str, n_per_class: int, classes: int, noise: float, seed: int,
                  features: int = 2, radius: float = 4.0) -> tuple[Dataset, Dataset]:
    """Deterministic ``blobs`` or ``spirals`` classification data.

    Blob centers sit on a sphere of ``radius`` in ``features`` dimensions, so
    every center is an extreme point and noise-free blobs are linearly
    separable. Spirals are always 2-D.
    """
    if classes < 2 or n_per_class < 2:
        raise ConfigurationError("need classes >= 2 and n_per_class >= 2")
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(classes), n_per_class)
    if kind == "blobs":
        if features == 2:
            ang = 2 * np.pi * np.arange(classes) / classes
            centers = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        else:
            d = rng.normal(size=(classes, features))
            centers = radius * d / np.linalg.norm(d, axis=1, keepdims=True)
        x = centers[y] + noise * rng.normal(size=(classes * n_per_class, features))
    elif kind == "spirals":
        t = np.tile(np.linspace(0.05, 1.0, n_per_class), classes)
        theta = 3.0 * np.pi * t + 2 * np.pi * y / classes
        x = np.stack([t * np.cos(theta), t * np.sin(theta)], axis=1) * radius
        x = x + noise * rng.normal(size=x.shape)
    else:
        raise ConfigurationError(f"unknown synthetic kind {kind!r}")
    return _split(x, y, classes, n_per_class)


# --- IDX ---------------------------------------------------------------------


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"{what}: expected {n} bytes, got {len(buf)}")
    return buf


def _read_idx(path: str | Path, expected: int) -> tuple[int, np.ndarray]:
    """Read one IDX file whose magic must be ``expected`` (or its float64 variant)."""
    with open(path, "rb") as fh:
        magic, = struct.unpack(">I", _read_exact(fh, 4, f"{path} header"))
        dtype_code, ndim = (magic >> 8) & 0xFF, magic & 0xFF
        ok = magic == expected or (magic >> 16 == 0 and dtype_code == IDX_DOUBLE and ndim >= 1
                                   and expected == IMAGES_MAGIC)
        if not ok:
            raise FormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected:08x}")
        dims = struct.unpack(f">{ndim}I", _read_exact(fh, 4 * ndim, f"{path} dimensions"))
        dt = np.dtype(np.uint8) if dtype_code == IDX_UBYTE else np.dtype(">f8")
        n = math.prod(dims)
        arr = np.frombuffer(_read_exact(fh, n * dt.itemsize, f"{path} payload"), dtype=dt).reshape(dims)
    return magic, arr


def load_idx(images_path: str | Path, labels_path: str | Path, split: str = "train",
             num_classes: int | None = None) -> Dataset:
    """Load an IDX image/label pair.

    Unsigned-byte image files (magic 0x00000803) become N x 1 x H x W arrays
    scaled by 1/255. Float64 files (type code 0x0E) are returned unscaled with
    their header shape; this is how non-image data is exported.
    """
    img_magic, images = _read_idx(images_path, IMAGES_MAGIC)
    _, labels = _read_idx(labels_path, LABELS_MAGIC)
    if img_magic == IMAGES_MAGIC:
        x = images.astype(np.float64)[:, None] / 255.0
    else:
        x = images.astype(np.float64)
    if x.shape[0] != labels.shape[0]:
        raise ConsistencyError(f"{x.shape[0]} images but {labels.shape[0]} labels")
    y = labels.astype(np.int64)
    k = num_classes if num_classes is not None else int(y.max()) + 1 if y.size else 1
    return Dataset(x, y, k, split)


def _write_idx(path: str | Path, arr: np.ndarray, dtype_code: int) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", (dtype_code << 8) | arr.ndim))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.astype(np.uint8 if dtype_code == IDX_UBYTE else ">f8").tobytes())


def write_idx(dataset: Dataset, images_path: str | Path, labels_path: str | Path) -> None:
    """Export ``dataset`` so that :func:`load_idx` returns it unchanged.

    Single-channel images whose values are all multiples of 1/255 in [0, 1]
    are stored as unsigned bytes; anything else is stored as float64.
    """
    x = dataset.inputs
    as_bytes = x.ndim == 4 and x.shape[1] == 1
    if as_bytes:
        q = np.rint(x * 255.0)
        as_bytes = bool(np.all((q >= 0) & (q <= 255)) and np.array_equal(q / 255.0, x))
    if as_bytes:
        _write_idx(images_path, q[:, 0].astype(np.uint8), IDX_UBYTE)
    else:
        _write_idx(images_path, x, IDX_DOUBLE)
    if dataset.labels.size and dataset.labels.max() > 255:
        raise InputError("IDX label files hold unsigned bytes; labels must be < 256")
    _write_idx(labels_path, dataset.labels.astype(np.uint8), IDX_UBYTE)


def make_digit_idx(out_dir: str | Path, n_train: int = 2000, n_test: int = 1000, canvas: int = 12,
                   seed: int = 0) -> dict[str, Path]:
    """Write a small handwritten-digit IDX pair set built from scikit-learn's 8x8 digits.

    The 1797 source scans are split 2:1 before augmentation so no test image
    shares a source with a training image. Each output image places a source
    digit at a random offset on a ``canvas`` x ``canvas`` grid.
    """
    from sklearn.datasets import load_digits

    digits = load_digits()
    src = np.rint(digits.images * (255.0 / 16.0)).astype(np.uint8)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(src))
    cut = len(src) * 2 // 3
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split, pool, n in (("train", order[:cut], n_train), ("test", order[cut:], n_test)):
        picks = np.concatenate([pool, rng.choice(pool, size=max(0, n - len(pool)))])[:n]
        imgs = np.zeros((n, canvas, canvas), np.uint8)
        span = canvas - 8
        offs = rng.integers(0, span + 1, size=(n, 2))
        for i, (p, (r, c)) in enumerate(zip(picks, offs)):
            imgs[i, r:r + 8, c:c + 8] = src[p]
        ip, lp = out_dir / f"{split}-images-idx3-ubyte", out_dir / f"{split}-labels-idx1-ubyte"
        _write_idx(ip, imgs, IDX_UBYTE)
        _write_idx(lp, digits.target[picks].astype(np.uint8), IDX_UBYTE)
        paths[f"{split}_images"], paths[f"{split}_labels"] = ip, lp
    return paths


# --- batching ----------------------------------------------------------------


def epoch_order(n: int, seed: int, epoch: int, shuffle: bool = True) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches(dataset: Dataset, batch_size: int, seed: int = 0, shuffle: bool = True,
            epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(inputs, labels)`` covering every sample exactly once; the last batch may be short."""
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    order = epoch_order(len(dataset), seed, epoch, shuffle)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield dataset.inputs[idx], dataset.labels[idx]


def batch_indices(n: int, batch_size: int, seed: int, shuffle: bool, epoch: int) -> list[np.ndarray]:
    order = epoch_order(n, seed, epoch, shuffle)
    return [order[s:s + batch_size] for s in range(0, n, batch_size)]
