"""Class weighting schemes, class-balanced sampling, deferred re-weighting and mixup."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np


def _check_counts(counts) -> np.ndarray:
    n = np.asarray(counts, dtype=np.float64)
    if n.ndim != 1 or n.size == 0:
        raise ValueError("class counts must be a non-empty 1-D sequence")
    if np.any(n <= 0):
        raise ValueError(f"class counts must be positive, got {list(counts)}")
    return n


def _mean_one(w: np.ndarray) -> np.ndarray:
    return w * (w.size / w.sum())


def inverse_frequency_weights(counts: Sequence[int]) -> np.ndarray:
    """w_c proportional to 1/n_c, rescaled to mean 1."""
    return _mean_one(1.0 / _check_counts(counts))


def effective_number_weights(counts: Sequence[int], beta: float) -> np.ndarray:
    """w_c proportional to (1 - beta) / (1 - beta**n_c), rescaled to mean 1."""
    n = _check_counts(counts)
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must lie in [0, 1), got {beta}")
    # -expm1(n log beta) keeps 1 - beta**n accurate for beta close to 1
    with np.errstate(divide="ignore"):
        log_beta = np.log(beta) if beta > 0 else -np.inf
    effective = -np.expm1(n * log_beta) / (1.0 - beta) if beta > 0 else np.ones_like(n)
    return _mean_one(1.0 / effective)


def class_weights(counts: Sequence[int], scheme: str = "inverse", beta: float = 0.9999) -> np.ndarray:
    if scheme == "inverse":
        return inverse_frequency_weights(counts)
    if scheme == "effective":
        return effective_number_weights(counts, beta)
    if scheme == "uniform":
        return np.ones(len(_check_counts(counts)))
    raise ValueError(f"unknown weight scheme {scheme!r} (expected inverse, effective or uniform)")


def class_balanced_sampler(labels: Sequence[int], seed: int, num_classes: int | None = None) -> Iterator[int]:
    """Endless stream of sample indices: pick a class uniformly, then a member uniformly.

    ``labels`` are the dataset labels, so indices map back to their class.
    """
    labels = np.asarray(labels, dtype=np.int64)
    K = int(num_classes if num_classes is not None else labels.max() + 1)
    members = [np.flatnonzero(labels == c) for c in range(K)]
    empty = [c for c, m in enumerate(members) if m.size == 0]
    if empty:
        raise ValueError(f"class_balanced_sampler: classes {empty} have no samples")
    rng = np.random.default_rng(seed)

    def stream():
        while True:
            cls = rng.integers(K, size=1024)
            for c in cls:
                m = members[c]
                yield int(m[rng.integers(m.size)])

    return stream()


def balanced_epoch_indices(labels: Sequence[int], seed: int, length: int, num_classes: int | None = None) -> np.ndarray:
    it = class_balanced_sampler(labels, seed, num_classes)
    return np.fromiter((next(it) for _ in range(length)), dtype=np.int64, count=length)


@dataclass
class DrwSchedule:
    switch_epoch: int
    weights: np.ndarray

    def __post_init__(self):
        if self.switch_epoch < 0:
            raise ValueError("switch_epoch must be non-negative")
        self.weights = np.asarray(self.weights, dtype=np.float64)


def drw_weights(schedule: DrwSchedule, epoch: int) -> np.ndarray:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if epoch < schedule.switch_epoch:
        return np.ones_like(schedule.weights)
    return schedule.weights.copy()


@dataclass
class MixedBatch:
    x: np.ndarray
    labels: np.ndarray
    labels_perm: np.ndarray
    lam: float
    perm: np.ndarray


def mixup_batch(x: np.ndarray, labels: np.ndarray, alpha: float, seed, lam: float | None = None,
                perm: np.ndarray | None = None) -> MixedBatch:
    """Convex combination of the batch with a shuffled copy of itself.

    ``lam`` and ``perm`` may be forced; otherwise lam ~ Beta(alpha, alpha) and
    perm is a random permutation, both drawn from ``seed``.
    """
    if alpha <= 0:
        raise ValueError("mixup alpha must be positive")
    rng = np.random.default_rng(seed)
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    if perm is None:
        perm = rng.permutation(len(x))
    perm = np.asarray(perm, dtype=np.int64)
    mixed = lam * x + (1.0 - lam) * x[perm]
    labels = np.asarray(labels)
    return MixedBatch(mixed, labels, labels[perm], lam, perm)
