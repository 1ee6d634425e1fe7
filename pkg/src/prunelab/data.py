"""Datasets: IDX ingestion, synthetic blob images, batching."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    pass


class BadMagicError(IdxError):
    pass


class TruncatedFileError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float64 in [0, 1]
    labels: np.ndarray  # [N] int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be [N, C, H, W], got shape {self.images.shape}")
        if len(self.images) < 1 or len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images vs {len(self.labels)} labels")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self):
        return self.images.shape[1:]

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.split)


def _read_header(buf, path, magic, ndim):
    if len(buf) < 4 + 4 * ndim:
        raise TruncatedFileError(f"{path}: header truncated")
    found = struct.unpack(">I", buf[:4])[0]
    if found != magic:
        raise BadMagicError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", buf[4:4 + 4 * ndim])
    return dims, 4 + 4 * ndim


def read_idx_images(path):
    with open(path, "rb") as f:
        buf = f.read()
    (n, rows, cols), off = _read_header(buf, path, IMAGES_MAGIC, 3)
    body = buf[off:]
    if len(body) < n * rows * cols:
        raise TruncatedFileError(f"{path}: expected {n * rows * cols} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8, count=n * rows * cols).reshape(n, rows, cols)


def read_idx_labels(path):
    with open(path, "rb") as f:
        buf = f.read()
    (n,), off = _read_header(buf, path, LABELS_MAGIC, 1)
    body = buf[off:]
    if len(body) < n:
        raise TruncatedFileError(f"{path}: expected {n} label bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8, count=n)


def load_idx(images_path, labels_path, num_classes=None, split="train", limit=None):
    pixels = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(pixels) != len(labels):
        raise CountMismatchError(f"{len(pixels)} images but {len(labels)} labels")
    if limit is not None:
        pixels, labels = pixels[:limit], labels[:limit]
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    images = pixels[:, None, :, :].astype(np.float64) / 255.0
    return Dataset(images, labels.astype(np.int64), num_classes, split)


def write_idx(dataset, images_path, labels_path):
    """Inverse of :func:`load_idx` for single-channel datasets."""
    n, c, h, w = dataset.images.shape
    if c != 1:
        raise ValueError("IDX images are single-channel")
    pixels = np.rint(dataset.images[:, 0] * 255.0).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">4I", IMAGES_MAGIC, n, h, w))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">2I", LABELS_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def normalize(images):
    """Map arbitrary pixel arrays into [0, 1]; already-normalized data passes through unchanged."""
    images = np.asarray(images, dtype=np.float64)
    if images.size and images.min() >= 0.0 and images.max() <= 1.0:
        return images
    lo, hi = images.min(), images.max()
    if hi == lo:
        return np.zeros_like(images)
    return (images - lo) / (hi - lo)


def _class_centers(num_classes, side):
    # evenly spaced on a ring, so neighbouring classes sit close together
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    r = 0.3 * side
    c = (side - 1) / 2
    return np.stack([c + r * np.sin(angles), c + r * np.cos(angles)], axis=1)


def synth_blobs(num_classes, samples_per_class, image_side, seed, split="train",
                jitter=0.07, texture=0.06, noise=0.05):
    """Gaussian intensity blobs at class-specific ring positions.

    Besides the blob, each class carries a faint fixed +-``texture`` pattern.
    The blob is a large-amplitude feature that survives small l-inf
    perturbations; the texture is predictive but lies below typical attack
    budgets, so natural and robust training settle on different solutions.
    ``jitter`` is the blob-position spread as a fraction of ``image_side``.
    """
    if min(num_classes, samples_per_class, image_side) < 1:
        raise ValueError("num_classes, samples_per_class and image_side must be >= 1")
    n = num_classes * samples_per_class
    side = image_side
    # class geometry depends on the seed only, so train/test splits agree
    geo = np.random.default_rng([seed, 0])
    patterns = geo.choice([-1.0, 1.0], size=(num_classes, side, side))
    rng = np.random.default_rng([seed, 1 if split == "train" else 2])
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    centers = _class_centers(num_classes, side)[labels] + rng.normal(0, jitter * side, size=(n, 2))
    sigma = side / 6.0
    yy, xx = np.mgrid[0:side, 0:side]
    d2 = (yy[None] - centers[:, 0, None, None]) ** 2 + (xx[None] - centers[:, 1, None, None]) ** 2
    amp = rng.uniform(0.5, 0.7, size=(n, 1, 1))
    img = 0.2 + amp * np.exp(-d2 / (2 * sigma ** 2))
    img = img + texture * patterns[labels] + rng.normal(0, noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    order = rng.permutation(n)
    return Dataset(img[order, None], labels[order], num_classes, split)


@dataclass
class BatchIterator:
    """Shuffled mini-batches; the permutation is a pure function of (seed, epoch)."""

    dataset: Dataset
    batch_size: int
    seed: int = 0
    shuffle: bool = True
    epoch: int = field(default=0)

    def __len__(self):
        return math.ceil(len(self.dataset) / self.batch_size)

    def order(self, epoch):
        n = len(self.dataset)
        if not self.shuffle:
            return np.arange(n)
        return np.random.default_rng([self.seed, epoch]).permutation(n)

    def __iter__(self):
        idx = self.order(self.epoch)
        self.epoch += 1
        for start in range(0, len(idx), self.batch_size):
            sel = idx[start:start + self.batch_size]
            yield self.dataset.images[sel], self.dataset.labels[sel]
