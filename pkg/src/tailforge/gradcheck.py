"""Finite-difference verification of every loss on random instances."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import Tensor

KINK_GAP = 1e-3
BATCH, CLASSES, DIM = 8, 3, 5


def _labels(rng) -> np.ndarray:
    y = np.concatenate([np.repeat(np.arange(CLASSES), 2), rng.integers(0, CLASSES, BATCH - 2 * CLASSES)])
    return rng.permutation(y)


def _counts(rng) -> np.ndarray:
    return rng.integers(1, 200, CLASSES)


def _check_all(fn: Callable[..., Tensor], inputs: list[np.ndarray], eps: float) -> float:
    """Grad-check ``fn`` with respect to each input in turn, holding the others fixed."""
    worst = 0.0
    for k in range(len(inputs)):
        fixed = [Tensor(v) for v in inputs]

        def f(x, k=k, fixed=fixed):
            args = list(fixed)
            args[k] = x
            return fn(*args)

        worst = max(worst, ad.grad_check(f, Tensor(inputs[k].copy()), eps))
    return worst


def _centers(c: Tensor) -> L.CenterState:
    state = L.CenterState(*c.shape)
    state.centers = c
    return state


def _triplet_instance(rng, mining: str):
    """Random features, labels and margin whose hinges and hardest picks sit away from kinks."""
    while True:
        r = rng.standard_normal((BATCH, DIM))
        y = _labels(rng)
        margin = float(rng.uniform(0.5, 4.0))
        d2 = ((r[:, None] - r[None]) ** 2).sum(-1)
        same = y[:, None] == y[None]
        pos = same & ~np.eye(BATCH, dtype=bool)
        neg = ~same
        if mining == "all_valid":
            args = (d2[:, :, None] - d2[:, None, :] + margin)[pos[:, :, None] & neg[:, None, :]]
        else:
            args = []
            ok = True
            for a in range(BATCH):
                p, n = np.sort(d2[a][pos[a]])[::-1], np.sort(d2[a][neg[a]])
                if (p.size > 1 and p[0] - p[1] < KINK_GAP) or (n.size > 1 and n[1] - n[0] < KINK_GAP):
                    ok = False
                args.append(p[0] - n[0] + margin)
            if not ok:
                continue
            args = np.array(args)
        if np.all(np.abs(args) > KINK_GAP):
            return r, y, margin


def check_loss(name: str, rng: np.random.Generator, eps: float = 1e-5) -> float:
    """Max relative gradient error of one loss on one random instance."""
    y = _labels(rng)
    # unit-scale logits keep every softmax probability well above the finite-difference noise floor
    logits = rng.standard_normal((BATCH, CLASSES))
    if name == "ce":
        return _check_all(lambda lg: L.cross_entropy(lg, y), [logits], eps)
    if name == "weighted_ce":
        w = rng.uniform(0.1, 3.0, CLASSES)
        return _check_all(lambda lg: L.cross_entropy(lg, y, w), [logits], eps)
    if name == "focal":
        cfg = L.FocalConfig(gamma=float(rng.uniform(0.5, 3.0)))
        return _check_all(lambda lg: L.focal_loss(lg, y, cfg), [logits], eps)
    if name == "cb_focal":
        cfg = L.FocalConfig(gamma=2.0, class_balanced=True, beta=0.999)
        counts = _counts(rng)
        return _check_all(lambda lg: L.focal_loss(lg, y, cfg, counts), [logits], eps)
    if name == "ldam":
        counts = _counts(rng)
        w = rng.uniform(0.1, 3.0, CLASSES) if rng.random() < 0.5 else None
        cfg = L.LdamConfig()
        return _check_all(lambda lg: L.ldam_loss(lg, y, counts, cfg, w), [logits / cfg.scale], eps)
    if name == "center":
        r, c = rng.standard_normal((BATCH, DIM)), rng.standard_normal((CLASSES, DIM))
        return _check_all(lambda rr, cc: L.center_loss(rr, y, _centers(cc)), [r, c], eps)
    if name in ("triplet_all_valid", "triplet_batch_hard"):
        mining = name.removeprefix("triplet_")
        r, y, margin = _triplet_instance(rng, mining)
        cfg = L.TripletConfig(margin, mining)
        return _check_all(lambda rr: L.triplet_loss(rr, y, cfg), [r], eps)
    if name == "supcon":
        x = rng.standard_normal((BATCH, DIM))
        return _check_all(lambda xx: L.supcon_loss(ad.l2_normalize(xx), y), [x], eps)
    if name == "composite":
        kind = L.METRIC_KINDS[int(rng.integers(len(L.METRIC_KINDS)))]
        lam = float(rng.uniform(0.1, 2.0))
        r, x = rng.standard_normal((BATCH, DIM)), rng.standard_normal((BATCH, DIM))
        c = rng.standard_normal((CLASSES, DIM))
        metric = L.MetricLossConfig(kind, lam)
        if kind == "triplet":
            r, y, margin = _triplet_instance(rng, "all_valid")
            tcfg = L.TripletConfig(margin, "all_valid")
            return _check_all(lambda lg, rr: L.composite_stage1_loss(lg, rr, None, y, metric, triplet=tcfg),
                              [logits, r], eps)
        if kind == "supcon":
            return _check_all(lambda lg, xx: L.composite_stage1_loss(lg, None, ad.l2_normalize(xx), y, metric),
                              [logits, x], eps)
        return _check_all(lambda lg, rr, cc: L.composite_stage1_loss(lg, rr, None, y, metric, centers=_centers(cc)),
                          [logits, r, c], eps)
    raise KeyError(f"unknown loss {name!r}; valid: {', '.join(LOSS_NAMES)}")


LOSS_NAMES = ("ce", "weighted_ce", "focal", "cb_focal", "ldam", "center", "triplet_all_valid",
              "triplet_batch_hard", "supcon", "composite")


def run_gradcheck(names, trials: int, seed: int = 0, eps: float = 1e-5) -> dict[str, float]:
    """Worst relative error per loss over ``trials`` random instances."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    out = {}
    for name in names:
        if name not in LOSS_NAMES:
            raise KeyError(f"unknown loss {name!r}; valid: {', '.join(LOSS_NAMES)}")
        rng = np.random.default_rng([seed, LOSS_NAMES.index(name)])
        out[name] = max(check_loss(name, rng, eps) for _ in range(trials))
    return out
