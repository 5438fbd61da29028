"""Dataset ingestion: IDX image/label files (FashionMNIST et al.),
CIFAR-10 binary batches, a synthetic two-class desk-scale set, and
deterministic shuffled batching.

Pixel bytes are normalized to [0, 1] by dividing by 255; no further
standardization or augmentation is applied.
"""

from __future__ import annotations

import gzip
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (CountMismatchError, IdxMagicError, InputError,
                     LabelRangeError, RecordFormatError, TruncatedFileError)
from .nn import Batch
from .patterns import _overlap_weights

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049
CIFAR_RECORD_BYTES = 3073


@dataclass
class Dataset:
    """Immutable-by-convention image classification dataset."""

    images: np.ndarray      # (N, C, H, W) float64 in [0, 1]
    labels: np.ndarray      # (N,) int64
    split: str = "train"
    name: str = "dataset"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise InputError(f"images must be (N, C, H, W), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise InputError("one label per image required")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    @property
    def sample_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "Dataset":
        return Dataset(self.images[indices], self.labels[indices],
                       self.split, self.name)

    def batch(self, indices) -> Batch:
        return Batch(self.images[indices], self.labels[indices])


def _read_exact(fh, count: int, what: str, path) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise TruncatedFileError(f"{path}: expected {count} bytes of {what}, "
                                 f"got {len(data)}")
    return data


def _open_maybe_gzip(path):
    fh = open(path, "rb")
    if fh.read(2) == b"\x1f\x8b":
        fh.seek(0)
        return gzip.open(fh)
    fh.seek(0)
    return fh


def load_idx(images_path, labels_path, split: str = "train",
             name: str = "idx") -> Dataset:
    """Parse an IDX image/label file pair (gzip accepted transparently).

    Headers are big-endian: images carry magic 2051 then (count, rows,
    cols), labels carry magic 2049 then (count,).  Counts must match.
    """
    with _open_maybe_gzip(images_path) as fh:
        (magic,) = struct.unpack(">i", _read_exact(fh, 4, "magic", images_path))
        if magic != IDX_IMAGE_MAGIC:
            raise IdxMagicError(f"{images_path}: image magic {magic}, "
                                f"expected {IDX_IMAGE_MAGIC}")
        count, rows, cols = struct.unpack(
            ">iii", _read_exact(fh, 12, "image header", images_path))
        raw = _read_exact(fh, count * rows * cols, "pixels", images_path)
    images = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / 255.0
    images = images.reshape(count, 1, rows, cols)

    with _open_maybe_gzip(labels_path) as fh:
        (magic,) = struct.unpack(">i", _read_exact(fh, 4, "magic", labels_path))
        if magic != IDX_LABEL_MAGIC:
            raise IdxMagicError(f"{labels_path}: label magic {magic}, "
                                f"expected {IDX_LABEL_MAGIC}")
        (label_count,) = struct.unpack(
            ">i", _read_exact(fh, 4, "label header", labels_path))
        raw = _read_exact(fh, label_count, "labels", labels_path)
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    if count != label_count:
        raise CountMismatchError(f"{count} images but {label_count} labels")
    return Dataset(images, labels, split, name)


def load_cifar10(paths, split: str = "train", name: str = "cifar10") -> Dataset:
    """Parse CIFAR-10 binary batch files: 3073-byte records of one label
    byte followed by 3072 pixel bytes (3x32x32, plane-major)."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    chunks, label_chunks = [], []
    for path in paths:
        data = Path(path).read_bytes()
        if len(data) % CIFAR_RECORD_BYTES != 0:
            raise RecordFormatError(f"{path}: length {len(data)} is not a "
                                    f"multiple of {CIFAR_RECORD_BYTES}")
        records = np.frombuffer(data, dtype=np.uint8)
        records = records.reshape(-1, CIFAR_RECORD_BYTES)
        labels = records[:, 0]
        if labels.size and labels.max() > 9:
            raise LabelRangeError(f"{path}: label byte {labels.max()} > 9")
        chunks.append(records[:, 1:].reshape(-1, 3, 32, 32))
        label_chunks.append(labels)
    images = np.concatenate(chunks) if chunks else np.zeros((0, 3, 32, 32))
    labels = np.concatenate(label_chunks) if label_chunks else np.zeros(0, int)
    if images.shape[0] == 0:
        warnings.warn("CIFAR-10 source contained zero records")
    return Dataset(images.astype(np.float64) / 255.0,
                   labels.astype(np.int64), split, name)


def make_synthetic(n_per_class: int, image_size: int = 14, seed: int = 0,
                   split: str = "train", noise: float = 0.15) -> Dataset:
    """Two-class single-channel images: a Gaussian blob whose position
    depends on the class (upper-left vs lower-right quadrant) plus pixel
    noise.  Linearly separable by construction and deterministic per seed.
    """
    if n_per_class < 1:
        raise InputError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    h = w = image_size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    sigma = image_size / 6.0
    centers = {0: (h / 4.0, w / 4.0), 1: (3.0 * h / 4.0, 3.0 * w / 4.0)}
    images = np.empty((2 * n_per_class, 1, h, w))
    labels = np.empty(2 * n_per_class, dtype=np.int64)
    for cls in (0, 1):
        cy, cx = centers[cls]
        jitter = rng.uniform(-1.0, 1.0, size=(n_per_class, 2))
        blob = np.exp(-(((yy[None] - cy - jitter[:, 0, None, None]) ** 2
                         + (xx[None] - cx - jitter[:, 1, None, None]) ** 2)
                        / (2.0 * sigma**2)))
        noise_px = rng.normal(0.0, noise, size=(n_per_class, h, w))
        sl = slice(cls * n_per_class, (cls + 1) * n_per_class)
        images[sl, 0] = np.clip(0.8 * blob + noise_px, 0.0, 1.0)
        labels[sl] = cls
    return Dataset(images, labels, split, f"synthetic{image_size}")


def downsample_images(dataset: Dataset, out_h: int, out_w: int) -> Dataset:
    """Area-average every image to (out_h, out_w); same box filter as the
    pattern downsampler."""
    wr = _overlap_weights(out_h, dataset.images.shape[2])
    wc = _overlap_weights(out_w, dataset.images.shape[3])
    images = np.einsum("ij,ncjk,lk->ncil", wr, dataset.images, wc,
                       optimize=True)
    return Dataset(images, dataset.labels.copy(), dataset.split, dataset.name)


@dataclass
class Batches:
    """Endless deterministic batch stream: a seeded permutation is drawn
    each epoch and consumed in consecutive slices (last one may be short)."""

    dataset: Dataset
    batch_size: int
    seed: int = 0
    _rng: np.random.Generator = field(init=False, repr=False)
    _order: np.ndarray = field(init=False, repr=False)
    _pos: int = field(init=False, default=0, repr=False)

    def __post_init__(self):
        if self.batch_size < 1:
            raise InputError("batch_size must be >= 1")
        if len(self.dataset) == 0:
            raise InputError("cannot batch an empty dataset")
        self._rng = np.random.default_rng(self.seed)
        self._reshuffle()

    def _reshuffle(self):
        self._order = self._rng.permutation(len(self.dataset))
        self._pos = 0

    def next_batch(self) -> Batch:
        if self._pos >= len(self._order):
            self._reshuffle()
        sel = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return self.dataset.batch(sel)
