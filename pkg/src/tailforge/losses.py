"""Classification losses and the metric-learning losses used in stage 1.

All functions take and return :class:`~tailforge.autodiff.Tensor` objects so
gradients reach logits, features, projections and class centers.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rebalance import effective_number_weights

METRIC_KINDS = ("center", "triplet", "supcon")

# additive mask that removes self-similarity from the supcon denominator
_SELF_MASK = -1e9


class DegenerateBatchWarning(UserWarning):
    pass


@dataclass
class MetricLossConfig:
    kind: str | None = None
    lam: float = 0.0

    def __post_init__(self):
        if self.kind is not None and self.kind not in METRIC_KINDS:
            raise ValueError(f"unknown metric loss {self.kind!r}; expected one of {METRIC_KINDS}")
        if not self.lam >= 0:
            raise ValueError(f"metric loss coefficient must be >= 0, got {self.lam}")


@dataclass
class TripletConfig:
    margin: float = 50.0
    mining: str = "batch_hard"

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("triplet margin must be positive")
        if self.mining not in ("batch_hard", "all_valid"):
            raise ValueError(f"unknown triplet mining {self.mining!r}")


@dataclass
class SupConConfig:
    temperature: float = 0.05

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class FocalConfig:
    gamma: float = 2.0
    class_balanced: bool = False
    beta: float = 0.9999

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("focal gamma must be >= 0")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must lie in [0, 1)")


@dataclass
class LdamConfig:
    max_margin: float = 0.5
    scale: float = 30.0
    drw: bool = False

    def __post_init__(self):
        if self.max_margin < 0 or self.scale <= 0:
            raise ValueError("LDAM max_margin must be >= 0 and scale positive")


class CenterState:
    """Learnable class centers, one row per class, initialized at zero."""

    def __init__(self, num_classes: int, feature_dim: int):
        self.centers = Tensor(np.zeros((num_classes, feature_dim)), requires_grad=True)


def _labels(labels, num_classes: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    if y.ndim != 1:
        raise ValueError("labels must be 1-D")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        bad = int(y[(y < 0) | (y >= num_classes)][0])
        raise ValueError(f"label {bad} out of range [0, {num_classes})")
    return y


def _one_hot(y: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((y.size, k))
    out[np.arange(y.size), y] = 1.0
    return out


def _per_sample_nll(logits: Tensor, y: np.ndarray) -> Tensor:
    logp = ad.log_softmax(logits)
    return ad.scale(ad.sum(ad.mul(logp, _one_hot(y, logits.shape[1])), axis=1), -1.0)


def _weighted_mean(per_sample: Tensor, w: np.ndarray) -> Tensor:
    return ad.scale(ad.sum(ad.mul(per_sample, w)), 1.0 / float(w.sum()))


def cross_entropy(logits: Tensor, labels, class_weights=None) -> Tensor:
    """Mean of -log softmax at the true class, weighted by sum(w_i l_i) / sum(w_i)."""
    if logits.ndim != 2:
        raise ad.ShapeError("cross_entropy", logits.shape, detail="logits must be B x K")
    y = _labels(labels, logits.shape[1])
    if y.size != logits.shape[0]:
        raise ad.ShapeError("cross_entropy", logits.shape, y.shape)
    nll = _per_sample_nll(logits, y)
    w = np.ones(y.size) if class_weights is None else np.asarray(class_weights, dtype=np.float64)[y]
    return _weighted_mean(nll, w)


def center_loss(r: Tensor, labels, state: CenterState) -> Tensor:
    """(1 / 2B) * sum_i ||r_i - c_{y_i}||^2."""
    c = state.centers
    if r.ndim != 2 or c.ndim != 2 or r.shape[1] != c.shape[1]:
        raise ad.ShapeError("center_loss", r.shape, c.shape)
    y = _labels(labels, c.shape[0])
    diff = ad.sub(r, ad.gather_rows(c, y))
    return ad.scale(ad.sum(ad.mul(diff, diff)), 0.5 / r.shape[0])


def _zero_like_loss(*inputs: Tensor) -> Tensor:
    # a zero that stays connected to the inputs so backward still runs
    return ad.scale(ad.sum(inputs[0]), 0.0)


def triplet_loss(r: Tensor, labels, cfg: TripletConfig | None = None) -> Tensor:
    """Hinge on squared Euclidean distances: d2(a, p) - d2(a, n) + margin."""
    cfg = cfg or TripletConfig()
    y = np.asarray(labels, dtype=np.int64)
    B = r.shape[0]
    same = y[:, None] == y[None, :]
    pos_mask = same & ~np.eye(B, dtype=bool)
    neg_mask = ~same
    has_both = pos_mask.any(axis=1) & neg_mask.any(axis=1)
    if not has_both.any():
        warnings.warn("triplet_loss: batch has no valid (anchor, positive, negative)", DegenerateBatchWarning)
        return _zero_like_loss(r)
    d2 = ad.pairwise_sq_dist(r, r)
    if cfg.mining == "batch_hard":
        anchors = np.flatnonzero(has_both)
        dv = d2.values
        hardest_pos = np.where(pos_mask, dv, -np.inf).argmax(axis=1)
        hardest_neg = np.where(neg_mask, dv, np.inf).argmin(axis=1)
        sel_pos = np.zeros((B, B))
        sel_neg = np.zeros((B, B))
        sel_pos[anchors, hardest_pos[anchors]] = 1.0
        sel_neg[anchors, hardest_neg[anchors]] = 1.0
        d_ap = ad.sum(ad.mul(d2, sel_pos), axis=1)
        d_an = ad.sum(ad.mul(d2, sel_neg), axis=1)
        hinge = ad.relu(ad.add(ad.sub(d_ap, d_an), cfg.margin))
        return ad.scale(ad.sum(ad.mul(hinge, has_both.astype(np.float64))), 1.0 / anchors.size)
    # all_valid: every (a, p, n) with y_p == y_a != y_n, p != a
    valid = pos_mask[:, :, None] & neg_mask[:, None, :]
    d_ap = ad.reshape(d2, (B, B, 1))
    d_an = ad.reshape(d2, (B, 1, B))
    hinge = ad.relu(ad.add(ad.sub(d_ap, d_an), cfg.margin))
    return ad.scale(ad.sum(ad.mul(hinge, valid.astype(np.float64))), 1.0 / int(valid.sum()))


def supcon_loss(z: Tensor, labels, cfg: SupConConfig | None = None) -> Tensor:
    """Supervised contrastive loss on unit-norm rows; positives are other same-label samples."""
    cfg = cfg or SupConConfig()
    if z.ndim != 2:
        raise ad.ShapeError("supcon_loss", z.shape, detail="z must be B x d")
    norms = np.sqrt((z.values**2).sum(axis=1))
    off = np.flatnonzero(np.abs(norms - 1.0) > 1e-6)
    if off.size:
        raise ValueError(f"supcon_loss: row {int(off[0])} has norm {norms[off[0]]:.9f}, expected unit rows")
    y = np.asarray(labels, dtype=np.int64)
    B = z.shape[0]
    eye = np.eye(B, dtype=bool)
    pos = (y[:, None] == y[None, :]) & ~eye
    n_pos = pos.sum(axis=1)
    anchors = n_pos > 0
    if not anchors.any():
        warnings.warn("supcon_loss: no sample in the batch has a positive", DegenerateBatchWarning)
        return _zero_like_loss(z)
    sim = ad.scale(ad.matmul(z, ad.transpose(z)), 1.0 / cfg.temperature)
    logp = ad.log_softmax(ad.add(sim, np.where(eye, _SELF_MASK, 0.0)))
    coef = np.zeros((B, B))
    coef[anchors] = pos[anchors] / n_pos[anchors, None]
    return ad.scale(ad.sum(ad.mul(logp, coef)), -1.0 / int(anchors.sum()))


def focal_loss(logits: Tensor, labels, cfg: FocalConfig | None = None, class_counts=None) -> Tensor:
    """Mean of -w_y (1 - p_t)^gamma log p_t."""
    cfg = cfg or FocalConfig()
    K = logits.shape[1]
    y = _labels(labels, K)
    if cfg.class_balanced:
        if class_counts is None:
            raise ValueError("class-balanced focal loss needs class counts")
        w = effective_number_weights(class_counts, cfg.beta)[y]
    else:
        w = np.ones(y.size)
    logp_t = ad.sum(ad.mul(ad.log_softmax(logits), _one_hot(y, K)), axis=1)
    if cfg.gamma == 0:
        per = ad.scale(logp_t, -1.0)
    else:
        one_minus = ad.sub(1.0, ad.exp(logp_t))
        per = ad.scale(ad.mul(ad.power(one_minus, cfg.gamma), logp_t), -1.0)
    return ad.scale(ad.sum(ad.mul(per, w)), 1.0 / y.size)


def ldam_margins(class_counts, max_margin: float) -> np.ndarray:
    n = np.asarray(class_counts, dtype=np.float64)
    if np.any(n <= 0):
        raise ValueError(f"LDAM needs positive class counts, got {list(class_counts)}")
    raw = n**-0.25
    return raw * (max_margin / raw.max())


def ldam_loss(logits: Tensor, labels, class_counts, cfg: LdamConfig | None = None, class_weights=None) -> Tensor:
    """Cross-entropy on s * (logits - margin_y * onehot_y) with margins proportional to n_c^(-1/4)."""
    cfg = cfg or LdamConfig()
    K = logits.shape[1]
    y = _labels(labels, K)
    delta = ldam_margins(class_counts, cfg.max_margin)
    shifted = ad.scale(ad.sub(logits, _one_hot(y, K) * delta[y][:, None]), cfg.scale)
    return cross_entropy(shifted, y, class_weights)


def composite_stage1_loss(logits: Tensor | None, r: Tensor | None, z: Tensor | None, labels,
                          metric: MetricLossConfig, *, centers: CenterState | None = None,
                          triplet: TripletConfig | None = None, supcon: SupConConfig | None = None,
                          use_ce: bool = True, class_weights=None) -> Tensor:
    """CE + lambda * metric loss.  ``use_ce=False`` drops the CE term (metric loss alone)."""
    terms = []
    if use_ce:
        if logits is None:
            raise ValueError("composite loss: CE term needs logits")
        terms.append(cross_entropy(logits, labels, class_weights))
    if metric.kind is not None and metric.lam > 0:
        lam = metric.lam
        if metric.kind == "center":
            if r is None or centers is None:
                raise ValueError("composite loss: center loss needs features r and a CenterState")
            lm = center_loss(r, labels, centers)
        elif metric.kind == "triplet":
            if r is None:
                raise ValueError("composite loss: triplet loss needs features r")
            lm = triplet_loss(r, labels, triplet)
        else:
            if z is None:
                raise ValueError("composite loss: supcon loss needs projections z")
            lm = supcon_loss(z, labels, supcon)
        terms.append(ad.scale(lm, lam))
    if not terms:
        raise ValueError("composite loss has no terms (CE disabled and no metric loss)")
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total
