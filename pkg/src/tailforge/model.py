"""Feature extractor, projection head and classifier head with per-part freezing."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PARTS = ("extractor", "projection", "head")
CKPT_MAGIC = b"TFCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ExtractorSpec:
    kind: str = "mlp"  # "mlp" or "tiny_cnn"
    widths: list[int] = field(default_factory=lambda: [16, 64, 32])
    channels: list[int] = field(default_factory=lambda: [8, 16])
    kernel_size: int = 3
    input_shape: list[int] = field(default_factory=lambda: [16])


@dataclass
class NetworkSpec:
    extractor: ExtractorSpec
    feature_dim: int
    num_classes: int
    projection_widths: list[int] | None = None
    projection_dim: int = 16

    def __post_init__(self):
        if isinstance(self.extractor, dict):
            self.extractor = ExtractorSpec(**self.extractor)
        if self.projection_widths is None:
            self.projection_widths = [self.feature_dim, self.feature_dim]
        self.validate()

    def validate(self) -> None:
        ex = self.extractor
        if ex.kind == "mlp":
            widths = list(ex.widths)
            if len(widths) < 2:
                raise ValueError("mlp extractor needs at least input and output widths")
            if len(ex.input_shape) != 1 or ex.input_shape[0] != widths[0]:
                raise ValueError(f"mlp input_shape {ex.input_shape} does not match first width {widths[0]}")
            if widths[-1] != self.feature_dim:
                raise ValueError(f"feature_dim {self.feature_dim} != extractor output width {widths[-1]}")
        elif ex.kind == "tiny_cnn":
            widths = list(ex.channels)
            if len(ex.input_shape) != 3:
                raise ValueError("tiny_cnn input_shape must be [C, H, W]")
            if ex.kernel_size < 1 or ex.kernel_size % 2 == 0:
                raise ValueError("tiny_cnn kernel_size must be a positive odd integer")
            widths = [ex.input_shape[0], *widths]
        else:
            raise ValueError(f"unknown extractor kind {ex.kind!r}")
        if len(self.projection_widths) != 2:
            raise ValueError("projection head has exactly 3 affine layers (2 hidden widths)")
        all_widths = [*widths, *ex.input_shape, self.feature_dim, self.num_classes,
                      *self.projection_widths, self.projection_dim]
        if any(int(w) <= 0 for w in all_widths):
            raise ValueError(f"zero-width layer in network spec: {all_widths}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        d = dict(d)
        d["extractor"] = ExtractorSpec(**d["extractor"])
        return cls(**d)


def default_spec(input_shape, num_classes: int) -> NetworkSpec:
    """Desk-scale network: mlp [D, 64, 32] for vectors, tiny_cnn [8, 16] for images."""
    input_shape = list(input_shape)
    if len(input_shape) == 1:
        ex = ExtractorSpec(kind="mlp", widths=[input_shape[0], 64, 32], input_shape=input_shape)
    else:
        ex = ExtractorSpec(kind="tiny_cnn", channels=[8, 16], kernel_size=3, input_shape=input_shape)
    return NetworkSpec(extractor=ex, feature_dim=32, num_classes=num_classes)


def param_shapes(spec: NetworkSpec) -> dict[str, tuple[str, tuple[int, ...]]]:
    """Ordered mapping name -> (part, shape)."""
    out: dict[str, tuple[str, tuple[int, ...]]] = {}
    ex = spec.extractor
    if ex.kind == "mlp":
        w = ex.widths
        for i in range(len(w) - 1):
            out[f"extractor.fc{i}.weight"] = ("extractor", (w[i], w[i + 1]))
            out[f"extractor.fc{i}.bias"] = ("extractor", (w[i + 1],))
    else:
        chans = [ex.input_shape[0], *ex.channels]
        k = ex.kernel_size
        for i in range(len(chans) - 1):
            out[f"extractor.conv{i}.weight"] = ("extractor", (chans[i + 1], chans[i], k, k))
            out[f"extractor.conv{i}.bias"] = ("extractor", (chans[i + 1],))
        out["extractor.fc.weight"] = ("extractor", (chans[-1], spec.feature_dim))
        out["extractor.fc.bias"] = ("extractor", (spec.feature_dim,))
    pw = [spec.feature_dim, *spec.projection_widths, spec.projection_dim]
    for i in range(3):
        out[f"projection.fc{i}.weight"] = ("projection", (pw[i], pw[i + 1]))
        out[f"projection.fc{i}.bias"] = ("projection", (pw[i + 1],))
    out["head.weight"] = ("head", (spec.feature_dim, spec.num_classes))
    out["head.bias"] = ("head", (spec.num_classes,))
    return out


def param_count(spec: NetworkSpec) -> int:
    return int(sum(np.prod(shape) for _, shape in param_shapes(spec).values()))


def _fan_in(shape: tuple[int, ...]) -> int:
    # affine weights are stored in x out, conv kernels as O x C x k x k
    return shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))


class NetworkParams:
    """Named parameter tensors grouped by part, with a frozen flag per part."""

    def __init__(self, spec: NetworkSpec, tensors: dict[str, Tensor], parts: dict[str, str]):
        self.spec = spec
        self.tensors = tensors
        self.parts = parts
        self.frozen = {p: False for p in PARTS}
        for t in tensors.values():
            t.requires_grad = True

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def freeze(self, *parts: str) -> None:
        for part in parts:
            if part not in PARTS:
                raise KeyError(part)
            self.frozen[part] = True
        self._sync()

    def unfreeze(self, *parts: str) -> None:
        for part in parts:
            self.frozen[part] = False
        self._sync()

    def _sync(self) -> None:
        for name, t in self.tensors.items():
            t.requires_grad = not self.frozen[self.parts[name]]

    def trainable(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.tensors.items() if not self.frozen[self.parts[n]]}

    def of_part(self, part: str) -> dict[str, Tensor]:
        return {n: t for n, t in self.tensors.items() if self.parts[n] == part}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.values.copy() for n, t in self.tensors.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, t in self.tensors.items():
            if state[n].shape != t.shape:
                raise ad.ShapeError("load_state", t.shape, state[n].shape, detail=n)
            t.values = np.array(state[n], dtype=np.float64)
            t.zero_grad()

    def copy(self) -> "NetworkParams":
        out = NetworkParams(self.spec, {n: Tensor(t.values.copy()) for n, t in self.tensors.items()}, dict(self.parts))
        out.frozen = dict(self.frozen)
        out._sync()
        return out


def init_params(spec: NetworkSpec, seed: int) -> NetworkParams:
    """Kaiming-uniform weights (fan-in), zero biases."""
    spec.validate()
    rng = np.random.default_rng(seed)
    tensors, parts = {}, {}
    for name, (part, shape) in param_shapes(spec).items():
        if name.endswith(".bias"):
            values = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / _fan_in(shape))
            values = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(values)
        parts[name] = part
    return NetworkParams(spec, tensors, parts)


def _affine(x: Tensor, params: NetworkParams, prefix: str) -> Tensor:
    return ad.add(ad.matmul(x, params[prefix + ".weight"]), params[prefix + ".bias"])


def forward_features(params: NetworkParams, batch) -> Tensor:
    """Extractor output r, one row per sample."""
    spec = params.spec
    ex = spec.extractor
    x = ad.as_tensor(batch)
    expected = tuple(ex.input_shape)
    if x.ndim != len(expected) + 1 or x.shape[1:] != expected:
        raise ad.ShapeError("forward_features", x.shape, (-1, *expected))
    if ex.kind == "mlp":
        h = x
        for i in range(len(ex.widths) - 1):
            h = ad.relu(_affine(h, params, f"extractor.fc{i}"))
        return h
    h = x
    for i in range(len(ex.channels)):
        h = ad.relu(ad.conv2d(h, params[f"extractor.conv{i}.weight"], params[f"extractor.conv{i}.bias"],
                              padding=ex.kernel_size // 2))
    pooled = ad.mean(h, axis=(2, 3))
    return ad.relu(_affine(pooled, params, "extractor.fc"))


def forward_projection(params: NetworkParams, r: Tensor) -> Tensor:
    """3-layer MLP on r followed by row-wise L2 normalization."""
    h = ad.relu(_affine(r, params, "projection.fc0"))
    h = ad.relu(_affine(h, params, "projection.fc1"))
    h = _affine(h, params, "projection.fc2")
    norms = np.sqrt((h.values**2).sum(axis=1))
    dead = np.flatnonzero(norms == 0.0)
    if dead.size:
        raise ValueError(f"forward_projection: row {int(dead[0])} is all-zero before normalization")
    return ad.l2_normalize(h)


def forward_logits(params: NetworkParams, r: Tensor) -> Tensor:
    return _affine(r, params, "head")


def predict(params: NetworkParams, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
    preds = []
    for start in range(0, len(x), batch_size):
        logits = forward_logits(params, forward_features(params, Tensor(x[start : start + batch_size])))
        preds.append(np.argmax(logits.values, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, params: NetworkParams, extra: dict[str, np.ndarray] | None = None) -> None:
    """Write spec JSON and every tensor (plus ``extra`` named arrays) in the TFCK layout."""
    spec_bytes = params.spec.to_json().encode()
    buf = bytearray(CKPT_MAGIC)
    buf += struct.pack("<II", CKPT_VERSION, len(spec_bytes))
    buf += spec_bytes
    arrays = {n: t.values for n, t in params.tensors.items()}
    for n, v in (extra or {}).items():
        arrays[n] = np.asarray(v, dtype=np.float64)
    for name, values in arrays.items():
        nb = name.encode()
        buf += struct.pack("<I", len(nb)) + nb
        buf += struct.pack("<I", values.ndim)
        buf += struct.pack(f"<{values.ndim}I", *values.shape)
        buf += np.ascontiguousarray(values, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> tuple[NetworkParams, dict[str, np.ndarray]]:
    """Inverse of :func:`save_checkpoint`; returns the params and any extra arrays."""
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError("bad magic")
    try:
        version, spec_len = struct.unpack_from("<II", data, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        spec = NetworkSpec.from_dict(json.loads(data[pos : pos + spec_len].decode()))
        pos += spec_len
        arrays: dict[str, np.ndarray] = {}
        while pos < len(data):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + nlen].decode()
            pos += nlen
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 8 * count > len(data):
                raise CheckpointError("truncated checkpoint")
            arrays[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * count
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    shapes = param_shapes(spec)
    missing = [n for n in shapes if n not in arrays]
    if missing:
        raise CheckpointError(f"checkpoint missing tensors: {missing}")
    params = NetworkParams(spec, {n: Tensor(arrays.pop(n)) for n in shapes}, {n: p for n, (p, _) in shapes.items()})
    return params, arrays
