"""Confusion matrices, mean class recall (MCR) and majority/minority grouping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


def confusion(predictions: Sequence[int], labels: Sequence[int], num_classes: int) -> np.ndarray:
    """K x K counts; rows are true classes, columns predictions."""
    p = np.asarray(predictions, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if p.shape != y.shape:
        raise ValueError(f"confusion: {p.size} predictions vs {y.size} labels")
    for name, v in (("prediction", p), ("label", y)):
        if v.size and (v.min() < 0 or v.max() >= num_classes):
            raise ValueError(f"confusion: {name} outside [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y, p), 1)
    return cm


def per_class_recall(cm: np.ndarray) -> np.ndarray:
    rows = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(rows > 0, np.diag(cm) / np.maximum(rows, 1), np.nan)


def mean_class_recall(cm: np.ndarray, group: Sequence[int] | None = None) -> float:
    """Mean recall over ``group`` (all classes if None), as a percentage."""
    cm = np.asarray(cm)
    classes = range(cm.shape[0]) if group is None else list(group)
    if len(classes) == 0:
        raise ValueError("mean_class_recall: empty group")
    rows = cm.sum(axis=1)
    recalls = []
    for c in classes:
        if rows[c] == 0:
            raise ValueError(f"mean_class_recall: class {c} has no true samples")
        recalls.append(cm[c, c] / rows[c])
    return 100.0 * float(np.mean(recalls))


@dataclass
class GroupSpec:
    majority_size: int | None = None
    minority_size: int | None = None

    def sizes(self, num_classes: int) -> tuple[int, int]:
        major, minor = default_group_sizes(num_classes)
        major = self.majority_size if self.majority_size is not None else major
        minor = self.minority_size if self.minority_size is not None else minor
        return major, minor


def default_group_sizes(num_classes: int) -> tuple[int, int]:
    """3/3 groups, 3/2 for seven classes, shrunk to fit when K < 6."""
    if num_classes == 7:
        return 3, 2
    size = min(3, num_classes // 2)
    return size, size


def make_groups(train_counts: Sequence[int], spec: GroupSpec | None = None) -> tuple[list[int], list[int]]:
    """Majority = most frequent classes, minority = least frequent; ties go to the lower index."""
    counts = np.asarray(train_counts)
    K = counts.size
    major_n, minor_n = (spec or GroupSpec()).sizes(K)
    if major_n < 0 or minor_n < 0 or major_n + minor_n > K:
        raise ValueError(f"group sizes {major_n}/{minor_n} overlap for {K} classes")
    # stable sort on -count keeps lower indices first among equals
    by_freq = sorted(range(K), key=lambda c: (-counts[c], c))
    majority = sorted(by_freq[:major_n])
    minority = sorted(by_freq[K - minor_n:]) if minor_n else []
    return majority, minority


@dataclass
class EvalReport:
    per_class_recall: list[float]
    mcr_all: float
    mcr_major: float
    mcr_minor: float
    majority: list[int]
    minority: list[int]
    confusion: list[list[int]]
    seed: int | None = None
    method: str | None = None
    mcr_medium: float | None = None

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "mcr_all": self.mcr_all,
            "mcr_major": self.mcr_major,
            "mcr_minor": self.mcr_minor,
            "mcr_medium": self.mcr_medium,
            "majority": self.majority,
            "minority": self.minority,
            "per_class_recall": self.per_class_recall,
            "confusion": self.confusion,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**{k: d.get(k) for k in cls.__dataclass_fields__})


def evaluate(predictions, labels, train_counts, spec: GroupSpec | None = None, *, seed=None, method=None,
             with_medium: bool = False) -> EvalReport:
    K = len(train_counts)
    cm = confusion(predictions, labels, K)
    majority, minority = make_groups(train_counts, spec)
    recall = per_class_recall(cm)
    medium = None
    if with_medium:
        rest = [c for c in range(K) if c not in majority and c not in minority]
        medium = mean_class_recall(cm, rest) if rest else None
    return EvalReport(
        per_class_recall=[float(v) for v in recall],
        mcr_all=mean_class_recall(cm),
        mcr_major=mean_class_recall(cm, majority) if majority else math.nan,
        mcr_minor=mean_class_recall(cm, minority) if minority else math.nan,
        majority=majority,
        minority=minority,
        confusion=cm.tolist(),
        seed=seed,
        method=method,
        mcr_medium=medium,
    )


METRIC_FIELDS = ("mcr_all", "mcr_major", "mcr_minor")


@dataclass
class Aggregate:
    mean: dict[str, float] = field(default_factory=dict)
    std: dict[str, float] = field(default_factory=dict)
    n: int = 0


def aggregate_runs(reports: Sequence[EvalReport]) -> Aggregate:
    """Per-metric mean and population standard deviation over repeated runs."""
    if not reports:
        raise ValueError("aggregate_runs: need at least one report")
    ref = reports[0]
    for r in reports[1:]:
        if len(r.per_class_recall) != len(ref.per_class_recall) or r.majority != ref.majority \
                or r.minority != ref.minority:
            raise ValueError("aggregate_runs: reports differ in class count or grouping")
    out = Aggregate(n=len(reports))
    for name in METRIC_FIELDS:
        vals = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        out.mean[name] = float(vals.mean())
        out.std[name] = float(vals.std(ddof=0))
    return out
