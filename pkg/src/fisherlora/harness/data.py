"""Seeded synthetic datasets. Samples are columns."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..micrograd import Batch


@dataclass(frozen=True)
class Dataset:
    train: Batch
    eval: Batch


def _rng(seed: int, task_seed: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(task_seed)])


def gaussian_blobs(seed: int, task_seed: int, n_features: int, n_classes: int, n_train: int,
                   n_eval: int, noise: float = 1.0, separation: float = 1.5) -> Dataset:
    """Class means ``separation * N(0, I)``; samples ``mean + noise * N(0, I)``."""
    rng = _rng(seed, task_seed)
    means = rng.standard_normal((n_classes, n_features)) * separation
    total = n_train + n_eval
    labels = rng.integers(0, n_classes, size=total)
    x = means[labels].T + noise * rng.standard_normal((n_features, total))
    return Dataset(
        train=Batch(x[:, :n_train], labels[:n_train]),
        eval=Batch(x[:, n_train:], labels[n_train:]),
    )


def linear_regression(seed: int, task_seed: int, n_features: int, n_outputs: int, n_train: int,
                      n_eval: int, noise: float = 0.1) -> Dataset:
    """Targets ``T x + noise * N(0, I)`` for a seeded teacher ``T``."""
    rng = _rng(seed, task_seed)
    teacher = rng.standard_normal((n_outputs, n_features)) / np.sqrt(n_features)
    total = n_train + n_eval
    x = rng.standard_normal((n_features, total))
    y = teacher @ x + noise * rng.standard_normal((n_outputs, total))
    return Dataset(
        train=Batch(x[:, :n_train], y[:, :n_train]),
        eval=Batch(x[:, n_train:], y[:, n_train:]),
    )


def make_dataset(cfg, task_seed: int | None = None) -> Dataset:
    d = cfg.data
    task = d.task_seed if task_seed is None else task_seed
    if d.kind == "blobs":
        return gaussian_blobs(cfg.seed, task, d.n_features, d.n_classes, d.n_train, d.n_eval,
                              d.noise, d.separation)
    return linear_regression(cfg.seed, task, d.n_features, cfg.model.dims[-1], d.n_train,
                             d.n_eval, d.noise)


def minibatches(batch: Batch, size: int, count: int, rng: np.random.Generator):
    """``count`` minibatches walking a seeded permutation, reshuffling per epoch."""
    n = batch.size
    size = min(size, n)
    order = rng.permutation(n)
    pos = 0
    for _ in range(count):
        if pos + size > n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos:pos + size]
        pos += size
        targets = batch.targets[idx] if batch.targets.ndim == 1 else batch.targets[:, idx]
        yield Batch(batch.inputs[:, idx], targets)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=0) == labels))
