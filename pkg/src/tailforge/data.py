"""Labeled datasets, long-tail subsampling, splits, augmentation and synthetic data."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"IMB1"
FORMAT_VERSION = 1
LAYOUT_VECTOR, LAYOUT_IMAGE = 0, 1


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    samples: np.ndarray  # N x D or N x C x H x W
    labels: np.ndarray  # N ints in [0, K)
    num_classes: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if samples.ndim not in (2, 4):
            raise DatasetError(f"samples must be N x D or N x C x H x W, got shape {samples.shape}")
        if labels.shape != (samples.shape[0],):
            raise DatasetError(f"{labels.size} labels for {samples.shape[0]} samples")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")
        samples.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.labels.size

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.samples.shape[1:])

    @property
    def is_image(self) -> bool:
        return self.samples.ndim == 4

    def subset(self, index) -> "LabeledDataset":
        index = np.asarray(index, dtype=np.int64)
        return LabeledDataset(self.samples[index], self.labels[index], self.num_classes)

    def equals(self, other: "LabeledDataset") -> bool:
        return (self.num_classes == other.num_classes and self.samples.shape == other.samples.shape
                and np.array_equal(self.samples, other.samples) and np.array_equal(self.labels, other.labels))


# ---------------------------------------------------------------- long tail


@dataclass
class LongTailSpec:
    rho: float
    seed: int = 0
    profile: str = "exponential"

    def __post_init__(self):
        if self.rho < 1:
            raise DatasetError(f"imbalance ratio must be >= 1, got {self.rho}")
        if self.profile != "exponential":
            raise DatasetError(f"unsupported long-tail profile {self.profile!r}")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def long_tail_counts(num_classes: int, n_max: int, rho: float) -> list[int]:
    """n_c = round(n_max * rho ** (-c / (K - 1))) for c = 0 .. K-1."""
    if num_classes < 1 or n_max < 1:
        raise DatasetError("need at least one class and n_max >= 1")
    if num_classes == 1:
        return [n_max]
    return [_round_half_up(n_max * rho ** (-c / (num_classes - 1))) for c in range(num_classes)]


def compute_imbalance_ratio(counts: Sequence[int]) -> float:
    n = np.asarray(counts, dtype=np.float64)
    if n.size == 0 or np.any(n <= 0):
        raise DatasetError("class counts must be positive")
    return float(n.max() / n.min())


def make_long_tail(dataset: LabeledDataset, spec: LongTailSpec, n_max: int | None = None) -> LabeledDataset:
    """Keep an exponentially shrinking number of samples per class; class 0 keeps ``n_max``."""
    available = dataset.class_counts
    if n_max is None:
        n_max = int(available.min())
    target = long_tail_counts(dataset.num_classes, n_max, spec.rho)
    rng = np.random.default_rng(spec.seed)
    keep = []
    for c, n_c in enumerate(target):
        members = np.flatnonzero(dataset.labels == c)
        if n_c > members.size:
            raise DatasetError(f"class {c}: need {n_c} samples, only {members.size} available")
        keep.append(np.sort(rng.choice(members, size=n_c, replace=False)))
    return dataset.subset(np.sort(np.concatenate(keep)))


# ---------------------------------------------------------------- splits


def _largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    quotas = [n * r for r in ratios]
    base = [int(math.floor(q)) for q in quotas]
    leftover = n - sum(base)
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in order[:leftover]:
        base[i] += 1
    return base


def stratified_split(dataset: LabeledDataset, ratios: Sequence[float] = (0.75, 0.05, 0.20),
                     seed: int = 0) -> tuple[LabeledDataset, ...]:
    """Per-class proportional partition with largest-remainder rounding."""
    ratios = [float(r) for r in ratios]
    if any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DatasetError(f"split ratios must be positive and sum to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[] for _ in ratios]
    for c in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == c)
        if members.size == 0:
            continue
        if members.size < len(ratios):
            raise DatasetError(f"class {c} has {members.size} samples, fewer than {len(ratios)} partitions")
        sizes = _largest_remainder(members.size, ratios)
        if min(sizes) == 0:
            raise DatasetError(f"class {c} ({members.size} samples) leaves an empty partition at ratios {ratios}")
        shuffled = rng.permutation(members)
        bounds = np.cumsum([0] + sizes)
        for i in range(len(ratios)):
            parts[i].append(shuffled[bounds[i] : bounds[i + 1]])
    return tuple(dataset.subset(np.sort(np.concatenate(p))) for p in parts)


# ---------------------------------------------------------------- augmentation


@dataclass
class AugmentSpec:
    horizontal_flip_prob: float = 0.0
    max_rotation_degrees: float = 0.0
    pad_and_crop: int = 0

    def __post_init__(self):
        if not 0.0 <= self.horizontal_flip_prob <= 1.0:
            raise DatasetError("horizontal_flip_prob must lie in [0, 1]")
        if self.max_rotation_degrees < 0 or self.pad_and_crop < 0:
            raise DatasetError("rotation and padding must be non-negative")

    @property
    def is_identity(self) -> bool:
        return self.horizontal_flip_prob == 0 and self.max_rotation_degrees == 0 and self.pad_and_crop == 0


def hflip(image: np.ndarray) -> np.ndarray:
    return image[..., ::-1].copy()


def rotate_nearest(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate each channel counter-clockwise about the image center, nearest-neighbour sampling, zero fill."""
    _, H, W = image.shape
    theta = -math.radians(degrees)
    cos, sin = math.cos(theta), math.sin(theta)
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    ii, jj = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    dy, dx = ii - cy, jj - cx
    src_i = np.rint(cos * dy - sin * dx + cy).astype(np.int64)
    src_j = np.rint(sin * dy + cos * dx + cx).astype(np.int64)
    inside = (src_i >= 0) & (src_i < H) & (src_j >= 0) & (src_j < W)
    out = np.zeros_like(image)
    out[:, inside] = image[:, src_i[inside], src_j[inside]]
    return out


def augment(image: np.ndarray, spec: AugmentSpec, seed, center_crop: bool = False) -> np.ndarray:
    if image.ndim != 3:
        raise DatasetError(f"augment expects a C x H x W image, got shape {image.shape}")
    rng = np.random.default_rng(seed)
    out = np.array(image, dtype=np.float64)
    if spec.horizontal_flip_prob > 0 and rng.random() < spec.horizontal_flip_prob:
        out = hflip(out)
    if spec.max_rotation_degrees > 0:
        out = rotate_nearest(out, rng.uniform(-spec.max_rotation_degrees, spec.max_rotation_degrees))
    p = spec.pad_and_crop
    if p > 0:
        _, H, W = out.shape
        padded = np.pad(out, ((0, 0), (p, p), (p, p)))
        if center_crop:
            top, left = p, p
        else:
            top, left = int(rng.integers(0, 2 * p + 1)), int(rng.integers(0, 2 * p + 1))
        out = padded[:, top : top + H, left : left + W]
    return out


# ---------------------------------------------------------------- synthetic data


def _quantize(x: np.ndarray) -> np.ndarray:
    # float32-representable so the binary file format round-trips exactly
    return x.astype(np.float32).astype(np.float64)


def gaussian_class_means(num_classes: int, dims: int, separation: float, seed: int) -> np.ndarray:
    """Class means at pairwise distance ``separation`` along random orthonormal directions."""
    if num_classes < 2:
        raise DatasetError("need at least two classes")
    if separation <= 0:
        raise DatasetError("class_separation must be positive")
    rng = np.random.default_rng(seed)
    if dims >= num_classes:
        q, _ = np.linalg.qr(rng.standard_normal((dims, num_classes)))
        directions = q.T
    else:
        directions = rng.standard_normal((num_classes, dims))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return directions * (separation / math.sqrt(2.0))


def sample_gaussian_classes(means: np.ndarray, counts: Sequence[int], rng: np.random.Generator) -> LabeledDataset:
    K, D = means.shape
    xs, ys = [], []
    for c, n in enumerate(counts):
        xs.append(means[c] + rng.standard_normal((int(n), D)))
        ys.append(np.full(int(n), c))
    return LabeledDataset(_quantize(np.concatenate(xs)), np.concatenate(ys), K)


def synth_gaussian_longtail(num_classes: int, dims: int, rho: float, n_max: int, class_separation: float,
                            seed: int) -> LabeledDataset:
    """Unit-variance Gaussian classes with exponentially decaying counts."""
    means = gaussian_class_means(num_classes, dims, class_separation, seed)
    rng = np.random.default_rng([seed, 1])
    return sample_gaussian_classes(means, long_tail_counts(num_classes, n_max, rho), rng)


def synth_gaussian_splits(num_classes: int, dims: int, rho: float, n_max: int, class_separation: float,
                          seed: int, val_per_class: int = 50, test_per_class: int = 200):
    """Long-tailed train set plus balanced validation and test sets drawn from the same classes."""
    train = synth_gaussian_longtail(num_classes, dims, rho, n_max, class_separation, seed)
    means = gaussian_class_means(num_classes, dims, class_separation, seed)
    val = sample_gaussian_classes(means, [val_per_class] * num_classes, np.random.default_rng([seed, 2]))
    test = sample_gaussian_classes(means, [test_per_class] * num_classes, np.random.default_rng([seed, 3]))
    return train, val, test


def synth_image_classes(counts: Sequence[int], size: int = 12, channels: int = 1, noise: float = 0.15,
                        seed: int = 0) -> LabeledDataset:
    """Small images in [0, 1]: each class is a bright bar at its own orientation/position, plus noise."""
    K = len(counts)
    rng = np.random.default_rng(seed)
    templates = np.zeros((K, channels, size, size))
    for c in range(K):
        angle = math.pi * c / K
        ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
        dy, dx = ii - (size - 1) / 2, jj - (size - 1) / 2
        dist = np.abs(-math.sin(angle) * dx + math.cos(angle) * dy)
        templates[c] = (dist < 1.2).astype(np.float64)
    xs, ys = [], []
    for c, n in enumerate(counts):
        x = templates[c][None] * rng.uniform(0.6, 1.0, size=(int(n), 1, 1, 1))
        x = np.clip(x + noise * rng.standard_normal((int(n), channels, size, size)), 0.0, 1.0)
        xs.append(x)
        ys.append(np.full(int(n), c))
    return LabeledDataset(_quantize(np.concatenate(xs)), np.concatenate(ys), K)


# ---------------------------------------------------------------- file formats


def write_dataset(dataset: LabeledDataset, path) -> None:
    """Binary layout: magic, version, N, K, layout tag, dims, then (label u16, features f32) records."""
    N = len(dataset)
    if N == 0:
        raise DatasetError("refusing to write an empty dataset")
    if dataset.num_classes > 0xFFFF:
        raise DatasetError("labels must fit in u16")
    dims = dataset.input_shape
    layout = LAYOUT_IMAGE if dataset.is_image else LAYOUT_VECTOR
    header = MAGIC + struct.pack("<IIIB", FORMAT_VERSION, N, dataset.num_classes, layout)
    header += struct.pack(f"<{len(dims)}I", *dims)
    rec = np.dtype([("label", "<u2"), ("x", "<f4", (int(np.prod(dims)),))])
    body = np.zeros(N, dtype=rec)
    body["label"] = dataset.labels
    body["x"] = dataset.samples.reshape(N, -1)
    Path(path).write_bytes(header + body.tobytes())


def read_dataset(path) -> LabeledDataset:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise DatasetError("bad magic")
    try:
        version, N, K, layout = struct.unpack_from("<IIIB", data, 4)
        pos = 4 + 13
        if version != FORMAT_VERSION:
            raise DatasetError(f"unsupported dataset version {version}")
        if layout == LAYOUT_VECTOR:
            dims = struct.unpack_from("<I", data, pos)
        elif layout == LAYOUT_IMAGE:
            dims = struct.unpack_from("<III", data, pos)
        else:
            raise DatasetError(f"unknown layout tag {layout}")
    except struct.error:
        raise DatasetError("truncated file: incomplete header") from None
    pos += 4 * len(dims)
    rec = np.dtype([("label", "<u2"), ("x", "<f4", (int(np.prod(dims)),))])
    if len(data) - pos < N * rec.itemsize:
        raise DatasetError(f"truncated file: expected {N} records of {rec.itemsize} bytes")
    body = np.frombuffer(data, dtype=rec, count=N, offset=pos)
    labels = body["label"].astype(np.int64)
    if labels.size and labels.max() >= K:
        raise DatasetError(f"label {int(labels.max())} >= K={K}")
    samples = body["x"].astype(np.float64).reshape((N, *dims))
    return LabeledDataset(samples, labels, K)


def write_csv(dataset: LabeledDataset, path) -> None:
    if dataset.is_image:
        raise DatasetError("CSV export supports vector datasets only")
    D = dataset.input_shape[0]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", *(f"f{i}" for i in range(D))])
        for y, x in zip(dataset.labels, dataset.samples):
            w.writerow([int(y), *(repr(float(v)) for v in x)])


def read_csv(path, num_classes: int | None = None) -> LabeledDataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["label"]:
        raise DatasetError("CSV must start with a 'label,f0,f1,...' header")
    body = rows[1:]
    if not body:
        raise DatasetError("CSV has no samples")
    labels = np.array([int(r[0]) for r in body])
    samples = np.array([[float(v) for v in r[1:]] for r in body])
    K = num_classes if num_classes is not None else int(labels.max()) + 1
    return LabeledDataset(samples, labels, K)


def load_any(path, num_classes: int | None = None) -> LabeledDataset:
    return read_csv(path, num_classes) if str(path).endswith(".csv") else read_dataset(path)
