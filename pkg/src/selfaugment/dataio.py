"""Datasets: CIFAR-10 binary batches, a synthetic generator, and K-fold splits."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CIFAR_RECORD_BYTES = 3073
CIFAR_RECORDS_PER_BATCH = 10_000
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))


class DatasetError(OSError):
    """Dataset files are missing or malformed."""


@dataclass(frozen=True)
class Dataset:
    """Images as a float32 ``[N, C, H, W]`` array in [0, 1]; labels are optional."""

    images: np.ndarray
    labels: np.ndarray | None = None
    name: str = "dataset"
    num_classes: int | None = None

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be [N, C, H, W], got {self.images.shape}")
        if self.labels is not None:
            if len(self.labels) != len(self.images):
                raise ValueError("labels and images differ in length")
            if self.num_classes is not None and len(self.labels):
                if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
                    raise ValueError("label outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_size(self) -> tuple[int, int]:
        return self.images.shape[2], self.images.shape[3]

    def subset(self, indices, name: str | None = None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        labels = None if self.labels is None else self.labels[indices]
        return Dataset(self.images[indices], labels, name or self.name, self.num_classes)

    def subsample(self, n: int, seed: int) -> "Dataset":
        """Random subset of ``n`` images (the whole set if ``n`` >= its size)."""
        if n >= len(self):
            return self
        idx = np.sort(np.random.default_rng(seed).choice(len(self), size=n, replace=False))
        return self.subset(idx, f"{self.name}[{n}]")

    def unlabeled(self) -> "Dataset":
        return Dataset(self.images, None, self.name, None)


def _read_cifar_batch(path: Path) -> tuple[np.ndarray, np.ndarray]:
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise DatasetError(f"missing CIFAR-10 batch file {path}") from None
    if len(raw) % CIFAR_RECORD_BYTES:
        complete = len(raw) // CIFAR_RECORD_BYTES
        raise DatasetError(
            f"{path}: truncated record {complete} at byte offset {complete * CIFAR_RECORD_BYTES} "
            f"(file is {len(raw)} bytes, records are {CIFAR_RECORD_BYTES})"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        r = int(bad[0])
        raise DatasetError(f"{path}: label byte {labels[r]} > 9 in record {r} (offset {r * CIFAR_RECORD_BYTES})")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def load_cifar10(directory: str | os.PathLike, files: tuple[str, ...] = CIFAR_TRAIN_FILES) -> Dataset:
    """Load the CIFAR-10 binary training batches (1 label byte + R, G, B planes per record)."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"CIFAR-10 directory {directory} does not exist")
    parts = [_read_cifar_batch(directory / f) for f in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return Dataset(images, labels, "cifar10", 10)


def write_cifar_batch(path: str | os.PathLike, images: np.ndarray, labels: np.ndarray) -> None:
    """Inverse of the batch reader; used to build fixtures."""
    pix = np.clip(np.floor(images * 255.0 + 0.5), 0, 255).astype(np.uint8).reshape(len(images), -1)
    records = np.concatenate([labels.astype(np.uint8)[:, None], pix], axis=1)
    Path(path).write_bytes(records.tobytes())


def gen_synthetic(num_classes: int = 4, per_class: int = 64, size: tuple[int, int] = (16, 16),
                  seed: int = 0, noise: float = 0.15) -> Dataset:
    """Orientation-coded synthetic images.

    Every image carries a top-lit vertical luminance gradient (so its rotation
    is recoverable) and a class-specific combination of grating angle, tint
    and blob position (so classes are linearly separable from good features).
    """
    if num_classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    h, w = size
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    yn, xn = ys / max(h - 1, 1), xs / max(w - 1, 1)
    tints = np.stack([0.5 + 0.15 * np.cos(2 * np.pi * (c / num_classes + np.array([0, 1 / 3, 2 / 3])))
                      for c in range(num_classes)])

    n = num_classes * per_class
    labels = np.repeat(np.arange(num_classes), per_class)
    images = np.empty((n, 3, h, w), dtype=np.float32)
    for i, c in enumerate(labels):
        angle = np.pi * c / num_classes + rng.normal(0, 0.25)
        freq = 2.0 + rng.uniform(-0.3, 0.3)
        phase = rng.uniform(0, 2 * np.pi)
        grating = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xn * np.cos(angle) + yn * np.sin(angle)) + phase)
        gradient = 1.0 - yn * rng.uniform(0.1, 0.6)
        by = 0.62 + rng.normal(0, 0.05)
        bx = (c + 0.5) / num_classes + rng.normal(0, 0.15)
        blob = np.exp(-((yn - by) ** 2 + (xn - bx) ** 2) / (2 * 0.12**2))
        base = 0.55 * gradient + 0.25 * grating
        img = base[None] * (0.6 + 0.4 * tints[c][:, None, None]) + 0.3 * blob[None] * tints[c][:, None, None]
        img += rng.normal(0, noise, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)

    order = rng.permutation(n)
    return Dataset(images[order], labels[order], f"synthetic-{num_classes}x{per_class}-s{seed}", num_classes)


def gen_noise(n: int, size: tuple[int, int] = (16, 16), seed: int = 0) -> Dataset:
    """I.i.d. uniform noise images: rotation carries no information about them."""
    rng = np.random.default_rng(seed)
    images = rng.random((n, 3, *size)).astype(np.float32)
    return Dataset(images, None, f"noise-{n}-s{seed}")


@dataclass(frozen=True)
class FoldSplit:
    k: int
    model_idx: np.ndarray
    policy_idx: np.ndarray


def kfold_split(n: int, k: int, seed: int) -> list[FoldSplit]:
    """Shuffle once, cut into ``k`` folds, then halve each fold into (model, policy-evaluation) parts."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < 2 * k:
        raise ValueError(f"need at least 2k = {2 * k} samples, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    folds = []
    for i, part in enumerate(np.array_split(perm, k)):
        half = math.ceil(len(part) / 2)
        folds.append(FoldSplit(i, np.sort(part[:half]), np.sort(part[half:])))
    return folds
