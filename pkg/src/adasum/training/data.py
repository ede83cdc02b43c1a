"""Synthetic and CSV datasets plus deterministic rank sharding."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    n_classes: int

    def __len__(self):
        return self.X.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], self.n_classes)


def gauss_blobs(seed: int, n_samples: int = 4000, n_features: int = 2, n_classes: int = 2,
                spread: float = 1.0, separation: float = 2.0) -> Dataset:
    """Isotropic gaussian clusters, one per class, centres on a random sphere."""
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((n_classes, n_features))
    centers *= separation / np.linalg.norm(centers, axis=1, keepdims=True)
    y = np.arange(n_samples) % n_classes
    rng.shuffle(y)
    X = centers[y] + spread * rng.standard_normal((n_samples, n_features))
    return Dataset(X, y.astype(np.int64), n_classes)


def two_spirals(seed: int, n_samples: int = 2000, noise: float = 0.3, turns: float = 1.5) -> Dataset:
    """Two interleaved spirals in the plane; not linearly separable."""
    rng = np.random.default_rng(seed)
    half = n_samples // 2
    t = np.sqrt(rng.uniform(0.0, 1.0, half)) * turns * 2 * np.pi
    arm = np.column_stack([t * np.cos(t), t * np.sin(t)]) / (turns * np.pi)
    X = np.vstack([arm, -arm]) + noise / (turns * np.pi) * rng.standard_normal((2 * half, 2))
    y = np.repeat([0, 1], half)
    perm = rng.permutation(2 * half)
    return Dataset(X[perm], y[perm].astype(np.int64), 2)


def digits_csv(path) -> Dataset:
    """Rows of ``label,feature,feature,...`` with no header."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    raw = np.loadtxt(path, delimiter=",", ndmin=2)
    y = raw[:, 0].astype(np.int64)
    if np.any(raw[:, 0] != y) or y.min() < 0:
        raise ValueError("labels must be non-negative integers")
    return Dataset(raw[:, 1:].astype(np.float64), y, int(y.max()) + 1)


def make_dataset(kind: str, seed: int = 0, **kwargs) -> Dataset:
    if kind == "gauss_blobs":
        return gauss_blobs(seed, **kwargs)
    if kind == "two_spirals":
        return two_spirals(seed, **kwargs)
    if kind == "digits_csv":
        return digits_csv(kwargs["path"])
    if kind.startswith("digits_csv:"):
        return digits_csv(kind.split(":", 1)[1])
    raise ValueError(f"unknown dataset {kind!r}")


def train_test_split(data: Dataset, test_frac: float = 0.2, seed: int = 0) -> tuple[Dataset, Dataset]:
    perm = np.random.default_rng(seed).permutation(len(data))
    n_test = int(round(test_frac * len(data)))
    return data.subset(perm[n_test:]), data.subset(perm[:n_test])


def shard(n: int, rank: int, size: int, epoch: int, seed: int) -> np.ndarray:
    """This rank's contiguous shard of the epoch's shuffled index order.

    The shuffle depends only on ``(seed, epoch)``, so shards are disjoint and
    together cover ``range(n)``.
    """
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return np.array_split(perm, size)[rank]


def steps_per_epoch(n: int, size: int, batch_size: int) -> int:
    """Microbatches every rank can take per epoch (the smallest shard decides)."""
    return (n // size) // batch_size


def epoch_batches(n: int, rank: int, size: int, epoch: int, seed: int, batch_size: int) -> list[np.ndarray]:
    idx = shard(n, rank, size, epoch, seed)
    k = steps_per_epoch(n, size, batch_size)
    return [idx[i * batch_size:(i + 1) * batch_size] for i in range(k)]
