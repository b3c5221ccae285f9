"""SGD, the warmup + cosine learning-rate schedule, and two-stage training.

Stage 1 trains every part of the network with the method's loss (for the
metric-learning variants, CE plus a weighted metric loss).  Stage 2 freezes
the extractor and projection head and re-trains only the classifier head with
class re-weighting (cRW) or class-balanced re-sampling (cRS).
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as tfdata
from . import losses as L
from . import metrics as M
from . import rebalance as R
from .autodiff import Tensor
from .config import ExperimentConfig, Stage1Config, Stage2Config
from .model import (ExtractorSpec, NetworkParams, NetworkSpec, forward_features, forward_logits,
                    forward_projection, init_params, load_checkpoint, predict, save_checkpoint)

log = logging.getLogger(__name__)

BASE_METHODS = ("CE", "RS", "RW", "CE-DRW", "Focal", "CB-Focal", "LDAM", "LDAM-DRW", "Mixup")
METRIC_TAGS = {"CT": "center", "TP": "triplet", "SC": "supcon"}
STAGE2_TAGS = ("cRW", "cRS")
DEFAULT_LAMBDA = {"center": 0.001, "triplet": 0.001, "supcon": 1.0}


class NonFiniteLossError(ArithmeticError):
    def __init__(self, stage: int, epoch: int, batch: int, value: float):
        self.stage, self.epoch, self.batch = stage, epoch, batch
        super().__init__(f"non-finite loss {value} in stage {stage}, epoch {epoch}, batch {batch}")


# ---------------------------------------------------------------- optimizer + schedule


@dataclass
class SgdConfig:
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 32

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


@dataclass
class LrSchedule:
    warmup_epochs: int = 5
    peak_lr: float = 0.001
    min_lr: float = 1e-6
    total_epochs: int = 100

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < max(self.total_epochs, 1):
            raise ValueError("need 0 <= warmup_epochs < total_epochs")
        if self.min_lr > self.peak_lr:
            raise ValueError("min_lr must not exceed peak_lr")


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    """Linear warmup to peak, then cosine decay reaching min_lr on the final epoch."""
    if not 0 <= epoch < schedule.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    w = schedule.warmup_epochs
    if epoch < w:
        return schedule.peak_lr * (epoch + 1) / w
    t = epoch - w
    T = schedule.total_epochs - w - 1
    if T == 0:
        return schedule.peak_lr
    if t == T:
        return schedule.min_lr
    return schedule.min_lr + 0.5 * (schedule.peak_lr - schedule.min_lr) * (1.0 + math.cos(math.pi * t / T))


def sgd_step(params: dict[str, Tensor], lr: float, cfg: SgdConfig, velocity: dict[str, np.ndarray]) -> None:
    """Classic momentum with L2 decay folded into the gradient: v = m v + (g + wd w); w -= lr v."""
    for name, t in params.items():
        g = t.grad
        if not np.all(np.isfinite(g)):
            raise ad.NonFiniteError(f"non-finite gradient for parameter {name!r}")
        g = g + cfg.weight_decay * t.values if cfg.weight_decay else g
        v = velocity.get(name)
        v = g.copy() if v is None else cfg.momentum * v + g
        velocity[name] = v
        t.values = t.values - lr * v


# ---------------------------------------------------------------- method tags


@dataclass(frozen=True)
class StagePlan:
    tag: str
    base: str | None  # None: metric loss alone, no CE term
    metric: str | None
    stage2: str | None

    @property
    def use_ce(self) -> bool:
        return self.base is not None


def parse_method(tag: str) -> StagePlan:
    """Parse tags like ``CE``, ``LDAM-DRW->cRW``, ``CE+SC->cRW`` or ``SC->cRW`` (``→`` also accepted)."""
    norm = tag.replace("→", "->").replace(" ", "")
    first, _, second = norm.partition("->")
    valid = ("valid tags: " + ", ".join(BASE_METHODS) + "; optional +CT/+TP/+SC on CE; optional ->cRW/->cRS")
    stage2 = None
    if second:
        if second not in STAGE2_TAGS:
            raise ValueError(f"unknown second stage {second!r}; {valid}")
        stage2 = second
    tokens = first.split("+") if first else []
    base = metric = None
    for tok in tokens:
        if tok in BASE_METHODS and base is None:
            base = tok
        elif tok in METRIC_TAGS and metric is None:
            metric = METRIC_TAGS[tok]
        else:
            raise ValueError(f"unknown method tag {tag!r}; {valid}")
    if base is None and metric is None:
        raise ValueError(f"empty method tag {tag!r}; {valid}")
    if metric is not None and base not in (None, "CE"):
        raise ValueError(f"metric losses combine with CE only, got {tag!r}")
    return StagePlan(tag=tag, base=base, metric=metric, stage2=stage2)


# ---------------------------------------------------------------- records


@dataclass
class EpochStats:
    stage: int
    epoch: int
    lr: float
    train_loss: float
    val_mcr: float | None

    def to_dict(self) -> dict:
        return {"stage": self.stage, "epoch": self.epoch, "lr": self.lr, "train_loss": self.train_loss,
                "val_mcr": self.val_mcr}


@dataclass
class TrainRecord:
    seed: int
    epochs: list[EpochStats] = field(default_factory=list)
    checkpoint: str | None = None
    degenerate_batches: int = 0


@dataclass
class StageResult:
    params: NetworkParams
    record: TrainRecord
    centers: L.CenterState | None = None


# ---------------------------------------------------------------- helpers


def build_network_spec(cfg: ExperimentConfig, input_shape, num_classes: int) -> NetworkSpec:
    m = cfg.model
    input_shape = list(input_shape)
    kind = m.extractor
    if kind == "auto":
        kind = "mlp" if len(input_shape) == 1 else "tiny_cnn"
    if kind == "mlp":
        if len(input_shape) != 1:
            raise ValueError("mlp extractor needs vector inputs")
        ex = ExtractorSpec(kind="mlp", widths=[input_shape[0], *m.hidden, m.feature_dim], input_shape=input_shape)
    else:
        ex = ExtractorSpec(kind="tiny_cnn", channels=list(m.channels), kernel_size=m.kernel_size,
                           input_shape=input_shape)
    return NetworkSpec(extractor=ex, feature_dim=m.feature_dim, num_classes=num_classes,
                       projection_dim=m.projection_dim)


def _batches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    out = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    if out and len(out[-1]) == 1 and len(out) > 1:
        out.pop()
    return out


def _epoch_order(train: tfdata.LabeledDataset, balanced: bool, seed: int, stage: int, epoch: int) -> np.ndarray:
    if balanced:
        return R.balanced_epoch_indices(train.labels, [seed, stage, epoch], len(train), train.num_classes)
    return np.random.default_rng([seed, stage, epoch]).permutation(len(train))


def _inputs(train: tfdata.LabeledDataset, idx: np.ndarray, aug: tfdata.AugmentSpec | None, seed: int,
            stage: int, epoch: int) -> np.ndarray:
    x = train.samples[idx]
    if aug is None or aug.is_identity or not train.is_image:
        return x
    return np.stack([tfdata.augment(x[k], aug, [seed, stage, epoch, int(i)]) for k, i in enumerate(idx)])


def _augment_spec(cfg: ExperimentConfig) -> tfdata.AugmentSpec:
    a = cfg.dataset.augment
    return tfdata.AugmentSpec(a.horizontal_flip_prob, a.max_rotation_degrees, a.pad_and_crop)


def _schedule(s: Stage1Config | Stage2Config) -> LrSchedule:
    return LrSchedule(warmup_epochs=s.warmup_epochs if s.epochs > 0 else 0, peak_lr=s.peak_lr, min_lr=s.min_lr,
                      total_epochs=max(s.epochs, 1))


def validation_mcr(params: NetworkParams, val: tfdata.LabeledDataset | None) -> float | None:
    if val is None or len(val) == 0:
        return None
    cm = M.confusion(predict(params, val.samples), val.labels, val.num_classes)
    present = [c for c in range(val.num_classes) if cm[c].sum() > 0]
    return M.mean_class_recall(cm, present)


def metric_lambda(cfg: ExperimentConfig, metric: str | None) -> float:
    if metric is None:
        return 0.0
    return cfg.stage1.lam if cfg.stage1.lam is not None else DEFAULT_LAMBDA[metric]


# ---------------------------------------------------------------- stage 1


def _stage1_loss(plan: StagePlan, cfg: ExperimentConfig, params: NetworkParams, x: np.ndarray, y: np.ndarray,
                 counts: np.ndarray, epoch: int, batch_seed, centers: L.CenterState | None) -> Tensor:
    reb = cfg.rebalance
    s1 = cfg.stage1
    base = plan.base
    if base == "Mixup":
        mixed = R.mixup_batch(x, y, reb.mixup_alpha, batch_seed)
        logits = forward_logits(params, forward_features(params, Tensor(mixed.x)))
        return ad.add(ad.scale(L.cross_entropy(logits, mixed.labels), mixed.lam),
                      ad.scale(L.cross_entropy(logits, mixed.labels_perm), 1.0 - mixed.lam))

    r = forward_features(params, Tensor(x))
    logits = forward_logits(params, r) if plan.use_ce else None
    drw_switch = int(round(reb.drw_switch_fraction * s1.epochs))

    if base in (None, "CE", "RS", "RW", "CE-DRW"):
        weights = None
        if base == "RW":
            weights = R.class_weights(counts, reb.weight_scheme, reb.beta)
        elif base == "CE-DRW":
            weights = R.drw_weights(R.DrwSchedule(drw_switch, R.class_weights(counts, reb.weight_scheme, reb.beta)),
                                    epoch)
        lam = metric_lambda(cfg, plan.metric)
        metric = L.MetricLossConfig(plan.metric, lam)
        z = forward_projection(params, r) if plan.metric == "supcon" and lam > 0 else None
        return L.composite_stage1_loss(
            logits, r, z, y, metric, centers=centers,
            triplet=L.TripletConfig(s1.margin, s1.mining), supcon=L.SupConConfig(s1.temperature),
            use_ce=plan.use_ce, class_weights=weights)
    if base in ("Focal", "CB-Focal"):
        fc = L.FocalConfig(gamma=reb.focal_gamma, class_balanced=base == "CB-Focal", beta=reb.beta)
        return L.focal_loss(logits, y, fc, counts)
    if base in ("LDAM", "LDAM-DRW"):
        lc = L.LdamConfig(max_margin=reb.ldam_max_margin, scale=reb.ldam_scale, drw=base == "LDAM-DRW")
        weights = None
        if lc.drw:
            weights = R.drw_weights(R.DrwSchedule(drw_switch, R.class_weights(counts, reb.weight_scheme, reb.beta)),
                                    epoch)
        return L.ldam_loss(logits, y, counts, lc, weights)
    raise ValueError(f"unhandled base method {base!r}")


def train_stage1(plan: StagePlan, cfg: ExperimentConfig, train: tfdata.LabeledDataset,
                 val: tfdata.LabeledDataset | None, seed: int, checkpoint: str | Path | None = None,
                 on_epoch=None) -> StageResult:
    s1 = cfg.stage1
    spec = build_network_spec(cfg, train.input_shape, train.num_classes)
    params = init_params(spec, seed)
    centers = L.CenterState(train.num_classes, spec.feature_dim) if plan.metric == "center" else None
    trainable = dict(params.trainable())
    if centers is not None:
        trainable["loss.centers"] = centers.centers
    sgd = SgdConfig(s1.momentum, s1.weight_decay, s1.batch_size)
    schedule = _schedule(s1)
    velocity: dict[str, np.ndarray] = {}
    counts = train.class_counts
    aug = _augment_spec(cfg)
    record = TrainRecord(seed=seed)

    for epoch in range(s1.epochs):
        lr = lr_at(schedule, epoch)
        order = _epoch_order(train, plan.base == "RS", seed, 1, epoch)
        total, seen = 0.0, 0
        for b, idx in enumerate(_batches(order, s1.batch_size)):
            x = _inputs(train, idx, aug, seed, 1, epoch)
            y = train.labels[idx]
            for t in trainable.values():
                t.zero_grad()
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", L.DegenerateBatchWarning)
                loss = _stage1_loss(plan, cfg, params, x, y, counts, epoch, [seed, epoch, b], centers)
            record.degenerate_batches += sum(issubclass(w.category, L.DegenerateBatchWarning) for w in caught)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLossError(1, epoch, b, value)
            ad.backward(loss)
            sgd_step(trainable, lr, sgd, velocity)
            total += value * len(idx)
            seen += len(idx)
        stats = EpochStats(1, epoch, lr, total / max(seen, 1), validation_mcr(params, val))
        record.epochs.append(stats)
        log.debug("stage1 epoch %d lr %.3g loss %.4f val %s", epoch, lr, stats.train_loss, stats.val_mcr)
        if on_epoch:
            on_epoch(stats)

    params.zero_grad()
    if checkpoint is not None:
        extra = {"loss.centers": centers.centers.values} if centers is not None else None
        save_checkpoint(checkpoint, params, extra)
        record.checkpoint = str(checkpoint)
    return StageResult(params, record, centers)


# ---------------------------------------------------------------- stage 2


def train_stage2(source: NetworkParams | str | Path, scheme: str, cfg: ExperimentConfig,
                 train: tfdata.LabeledDataset, val: tfdata.LabeledDataset | None, seed: int,
                 checkpoint: str | Path | None = None, weights: np.ndarray | None = None,
                 on_epoch=None) -> StageResult:
    """Freeze extractor + projection and re-train the head with cRW or cRS.

    ``weights`` overrides the configured class weights for cRW.
    """
    if scheme not in STAGE2_TAGS:
        raise ValueError(f"unknown stage-2 scheme {scheme!r}; expected one of {STAGE2_TAGS}")
    params = load_checkpoint(source)[0] if isinstance(source, (str, Path)) else source.copy()
    params.freeze("extractor", "projection")
    s2 = cfg.stage2
    reb = cfg.rebalance
    if s2.reinit_head:
        fresh = init_params(params.spec, seed + 1)
        for name, t in params.of_part("head").items():
            t.values = fresh[name].values.copy()
    counts = train.class_counts
    if scheme == "cRW":
        w = R.class_weights(counts, reb.weight_scheme, reb.beta) if weights is None else np.asarray(weights, float)
    else:
        w = None
    head = params.of_part("head")
    sgd = SgdConfig(s2.momentum, s2.weight_decay, s2.batch_size)
    schedule = _schedule(s2)
    velocity: dict[str, np.ndarray] = {}
    aug = _augment_spec(cfg)
    record = TrainRecord(seed=seed)

    for epoch in range(s2.epochs):
        lr = lr_at(schedule, epoch)
        order = _epoch_order(train, scheme == "cRS", seed, 2, epoch)
        total, seen = 0.0, 0
        for b, idx in enumerate(_batches(order, s2.batch_size)):
            x = _inputs(train, idx, aug, seed, 2, epoch)
            y = train.labels[idx]
            for t in head.values():
                t.zero_grad()
            r = forward_features(params, Tensor(x))
            loss = L.cross_entropy(forward_logits(params, r), y, w)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLossError(2, epoch, b, value)
            ad.backward(loss)
            sgd_step(head, lr, sgd, velocity)
            total += value * len(idx)
            seen += len(idx)
        stats = EpochStats(2, epoch, lr, total / max(seen, 1), validation_mcr(params, val))
        record.epochs.append(stats)
        if on_epoch:
            on_epoch(stats)

    params.zero_grad()
    if checkpoint is not None:
        save_checkpoint(checkpoint, params)
        record.checkpoint = str(checkpoint)
    return StageResult(params, record)


# ---------------------------------------------------------------- orchestration


@dataclass
class Datasets:
    train: tfdata.LabeledDataset
    val: tfdata.LabeledDataset | None
    test: tfdata.LabeledDataset


def load_datasets(cfg: ExperimentConfig) -> Datasets:
    d = cfg.dataset
    if d.kind == "synthetic":
        seed = cfg.seed if d.data_seed is None else d.data_seed
        train, val, test = tfdata.synth_gaussian_splits(d.num_classes, d.dims, d.rho, d.n_max, d.separation, seed,
                                                        d.val_per_class, d.test_per_class)
        return Datasets(train, val, test)
    train = tfdata.load_any(d.train)
    if d.test is None:
        train, val, test = tfdata.stratified_split(train, (0.75, 0.05, 0.20), d.split_seed)
        return Datasets(train, val, test)
    val = tfdata.load_any(d.val, train.num_classes) if d.val else None
    return Datasets(train, val, tfdata.load_any(d.test, train.num_classes))


@dataclass
class RunResult:
    plan: StagePlan
    stage1: StageResult
    stage2: StageResult | None
    report: M.EvalReport

    @property
    def final(self) -> StageResult:
        return self.stage2 or self.stage1

    def records(self) -> list[EpochStats]:
        out = list(self.stage1.record.epochs)
        if self.stage2:
            out += self.stage2.record.epochs
        return out


def evaluate_params(params: NetworkParams, ds: Datasets, cfg: ExperimentConfig, seed: int, method: str,
                    with_medium: bool = False) -> M.EvalReport:
    group = M.GroupSpec(cfg.dataset.majority_size, cfg.dataset.minority_size)
    preds = predict(params, ds.test.samples)
    return M.evaluate(preds, ds.test.labels, ds.train.class_counts, group, seed=seed, method=method,
                      with_medium=with_medium)


def run_method(tag: str, cfg: ExperimentConfig, ds: Datasets | None = None, seed: int | None = None,
               out_dir: str | Path | None = None, stage1: StageResult | None = None) -> RunResult:
    """Train one named method end to end and evaluate it on the test split.

    ``stage1`` may carry an already-trained first stage to share between
    methods that differ only in their second stage.
    """
    plan = parse_method(tag)
    seed = cfg.seed if seed is None else seed
    ds = ds or load_datasets(cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if stage1 is None:
        stage1 = train_stage1(plan, cfg, ds.train, ds.val, seed,
                              checkpoint=out / "stage1.ckpt" if out else None)
    s2 = None
    if plan.stage2 is not None:
        source = out / "stage1.ckpt" if out is not None and (out / "stage1.ckpt").exists() else stage1.params
        s2 = train_stage2(source, plan.stage2, cfg, ds.train, ds.val, seed,
                          checkpoint=out / "stage2.ckpt" if out else None)
    final = s2.params if s2 else stage1.params
    report = evaluate_params(final, ds, cfg, seed, plan.tag)
    return RunResult(plan, stage1, s2, report)


def run_baseline(tag: str, cfg: ExperimentConfig, ds: Datasets | None = None, seed: int | None = None,
                 out_dir: str | Path | None = None) -> RunResult:
    plan = parse_method(tag)
    if plan.metric is not None:
        raise ValueError(f"{tag!r} is not a baseline; use run_method for metric-learning variants")
    return run_method(tag, cfg, ds, seed, out_dir)


def write_record(path: str | Path, result: RunResult) -> None:
    """JSON lines: one object per epoch, then a summary object."""
    lines = [json.dumps(e.to_dict(), sort_keys=True) for e in result.records()]
    summary = {
        "summary": True,
        "method": result.plan.tag,
        "seed": result.report.seed,
        "stage1_checkpoint": Path(result.stage1.record.checkpoint).name if result.stage1.record.checkpoint else None,
        "stage2_checkpoint": (Path(result.stage2.record.checkpoint).name
                              if result.stage2 and result.stage2.record.checkpoint else None),
        "degenerate_batches": result.stage1.record.degenerate_batches,
        "mcr_all": result.report.mcr_all,
        "mcr_major": result.report.mcr_major,
        "mcr_minor": result.report.mcr_minor,
    }
    lines.append(json.dumps(summary, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")
