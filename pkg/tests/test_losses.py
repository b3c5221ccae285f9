import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tailforge import autodiff as ad
from tailforge import losses as L
from tailforge.autodiff import Tensor

from .oracles import center_oracle, supcon_oracle, triplet_all_valid_oracle, triplet_batch_hard_oracle


def labels_with_pairs(rng, B, K):
    """Labels where every class present has at least two members."""
    y = np.repeat(np.arange(K), 2)
    y = np.concatenate([y, rng.integers(0, K, size=B - y.size)])
    return rng.permutation(y)


def unit_rows(rng, B, d):
    z = rng.standard_normal((B, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


# ---------------------------------------------------------------- cross entropy


def test_ce_uniform_logits():
    assert L.cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 3]).item() == pytest.approx(math.log(4), abs=1e-12)


def test_ce_saturated():
    logits = np.zeros((2, 3))
    logits[0, 1] = logits[1, 2] = 100.0
    assert L.cross_entropy(Tensor(logits), [1, 2]).item() < 1e-6


def test_ce_weighted_mean_of_equal_losses():
    logits = Tensor([[0.3, -0.2], [-0.2, 0.3]])
    plain = L.cross_entropy(logits, [0, 1]).item()
    assert L.cross_entropy(logits, [0, 1], [1.0, 3.0]).item() == pytest.approx(plain, abs=1e-15)


def test_ce_rejects_bad_label():
    with pytest.raises(ValueError, match="out of range"):
        L.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_uniform_weights_equal_unweighted():
    rng = np.random.default_rng(0)
    logits = Tensor(rng.standard_normal((7, 4)))
    y = rng.integers(0, 4, 7)
    assert L.cross_entropy(logits, y, np.ones(4)).item() == pytest.approx(L.cross_entropy(logits, y).item(), abs=1e-15)


# ---------------------------------------------------------------- center


def test_center_zero_at_centers():
    state = L.CenterState(2, 3)
    state.centers.values = np.array([[1.0, 2.0, 3.0], [-1.0, 0.0, 1.0]])
    r = Tensor(state.centers.values[[0, 1, 1]])
    assert L.center_loss(r, [0, 1, 1], state).item() == 0.0


def test_center_half_squared_norm():
    assert L.center_loss(Tensor([[1.0, 0.0]]), [0], L.CenterState(1, 2)).item() == pytest.approx(0.5)


def test_center_matches_loop_oracle():
    rng = np.random.default_rng(1)
    for _ in range(10):
        B, K, d = rng.integers(2, 17), rng.integers(2, 5), rng.integers(1, 6)
        r = rng.standard_normal((B, d))
        y = rng.integers(0, K, B)
        state = L.CenterState(K, d)
        state.centers.values = rng.standard_normal((K, d))
        got = L.center_loss(Tensor(r), y, state).item()
        assert got == pytest.approx(center_oracle(r, y, state.centers.values), abs=1e-10)


# ---------------------------------------------------------------- triplet


def test_triplet_margin_satisfied_gives_zero():
    r = np.array([[0.0, 0.0], [0.0, 0.0], [10.0, 0.0], [10.0, 0.0]])
    for mining in ("batch_hard", "all_valid"):
        cfg = L.TripletConfig(margin=50.0, mining=mining)
        assert L.triplet_loss(Tensor(r), [0, 0, 1, 1], cfg).item() == 0.0


def test_triplet_equidistant_gives_margin():
    # anchor at origin, positive and negative both at distance 1
    r = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    cfg = L.TripletConfig(margin=2.5, mining="all_valid")
    d2 = ((r[:, None] - r[None]) ** 2).sum(-1)
    # triples: (0,1,2) -> m; (1,0,2) -> d(1,0)-d(1,2)+m = 1-2+m
    expected = (2.5 + (d2[1, 0] - d2[1, 2] + 2.5)) / 2
    assert L.triplet_loss(Tensor(r), [0, 0, 1], cfg).item() == pytest.approx(expected)
    anchor_only = L.triplet_loss(Tensor(r[[0, 1, 2]]), [0, 0, 1], L.TripletConfig(2.5, "batch_hard"))
    assert anchor_only.item() == pytest.approx(expected)


@pytest.mark.parametrize("mining,oracle", [("all_valid", triplet_all_valid_oracle),
                                           ("batch_hard", triplet_batch_hard_oracle)])
def test_triplet_matches_enumeration(mining, oracle):
    rng = np.random.default_rng(2)
    for margin in (0.5, 2.0, 50.0):
        r = rng.standard_normal((8, 3))
        y = labels_with_pairs(rng, 8, 3)
        got = L.triplet_loss(Tensor(r), y, L.TripletConfig(margin, mining)).item()
        assert got == pytest.approx(oracle(r, y, margin), abs=1e-10)


def test_triplet_degenerate_batch_flags():
    with pytest.warns(L.DegenerateBatchWarning):
        out = L.triplet_loss(Tensor(np.ones((3, 2))), [0, 0, 0])
    assert out.item() == 0.0


# ---------------------------------------------------------------- supcon


def test_supcon_matches_double_loop():
    rng = np.random.default_rng(3)
    for tau in (0.05, 0.1, 0.5):
        B = int(rng.integers(4, 17))
        z = unit_rows(rng, B, 5)
        y = labels_with_pairs(rng, B, 3)
        got = L.supcon_loss(Tensor(z), y, L.SupConConfig(tau)).item()
        assert got == pytest.approx(supcon_oracle(z, y, tau), abs=1e-9, rel=0)


def test_supcon_rotation_invariant():
    rng = np.random.default_rng(4)
    z = unit_rows(rng, 10, 4)
    y = labels_with_pairs(rng, 10, 3)
    Q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    a = L.supcon_loss(Tensor(z), y).item()
    b = L.supcon_loss(Tensor(z @ Q), y).item()
    assert a == pytest.approx(b, abs=1e-9)


def test_supcon_perfect_clusters():
    z = np.array([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0]])
    assert L.supcon_loss(Tensor(z), [0, 0, 1, 1], L.SupConConfig(0.05)).item() < 1e-10


def test_supcon_rejects_non_unit_rows():
    with pytest.raises(ValueError, match="unit"):
        L.supcon_loss(Tensor([[1.0, 0.1], [0.0, 1.0]]), [0, 0])


def test_supcon_positive_scaling_is_noop():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((8, 4))
    y = labels_with_pairs(rng, 8, 2)
    a = L.supcon_loss(ad.l2_normalize(Tensor(x)), y).item()
    b = L.supcon_loss(ad.l2_normalize(Tensor(7.3 * x)), y).item()
    assert a == pytest.approx(b, abs=1e-9)


def test_supcon_anchor_without_positive_excluded():
    rng = np.random.default_rng(6)
    z = unit_rows(rng, 5, 3)
    y = np.array([0, 0, 1, 1, 2])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        got = L.supcon_loss(Tensor(z), y).item()
    assert got == pytest.approx(supcon_oracle(z, y, 0.05), abs=1e-9)


# ---------------------------------------------------------------- focal / LDAM


def test_focal_gamma_zero_is_ce():
    rng = np.random.default_rng(7)
    logits = Tensor(rng.standard_normal((9, 4)))
    y = rng.integers(0, 4, 9)
    a = L.focal_loss(logits, y, L.FocalConfig(gamma=0.0)).item()
    assert a == pytest.approx(L.cross_entropy(logits, y).item(), abs=1e-12)


def test_focal_half_probability():
    assert L.focal_loss(Tensor([[0.0, 0.0]]), [0], L.FocalConfig(2.0)).item() == pytest.approx(0.25 * math.log(2))


def test_focal_certain_prediction_contributes_zero():
    assert L.focal_loss(Tensor([[800.0, 0.0]]), [0], L.FocalConfig(2.0)).item() == 0.0


def test_cb_focal_needs_counts():
    with pytest.raises(ValueError, match="counts"):
        L.focal_loss(Tensor([[0.0, 0.0]]), [0], L.FocalConfig(class_balanced=True))


def test_ldam_margins():
    np.testing.assert_allclose(L.ldam_margins([1, 16], 0.5), [0.5, 0.25], rtol=0, atol=1e-15)
    np.testing.assert_allclose(L.ldam_margins([7, 7, 7], 0.3), [0.3] * 3)


def test_ldam_rejects_zero_count():
    with pytest.raises(ValueError):
        L.ldam_loss(Tensor(np.zeros((1, 2))), [0], [0, 5])


def test_ldam_reduces_to_ce():
    rng = np.random.default_rng(8)
    logits = Tensor(rng.standard_normal((6, 3)))
    y = rng.integers(0, 3, 6)
    got = L.ldam_loss(logits, y, [100, 10, 1], L.LdamConfig(max_margin=1e-12, scale=1.0)).item()
    assert got == pytest.approx(L.cross_entropy(logits, y).item(), abs=1e-9)


# ---------------------------------------------------------------- composite


def test_composite_lambda_zero_is_ce():
    rng = np.random.default_rng(9)
    logits, r = Tensor(rng.standard_normal((6, 3))), Tensor(rng.standard_normal((6, 4)))
    y = labels_with_pairs(rng, 6, 3)
    for kind in L.METRIC_KINDS:
        got = L.composite_stage1_loss(logits, r, None, y, L.MetricLossConfig(kind, 0.0),
                                      centers=L.CenterState(3, 4)).item()
        assert got == L.cross_entropy(logits, y).item()


def test_composite_center_value():
    rng = np.random.default_rng(10)
    logits, r = Tensor(rng.standard_normal((6, 3))), Tensor(rng.standard_normal((6, 4)))
    y = rng.integers(0, 3, 6)
    state = L.CenterState(3, 4)
    state.centers.values = rng.standard_normal((3, 4))
    got = L.composite_stage1_loss(logits, r, None, y, L.MetricLossConfig("center", 0.001), centers=state).item()
    expected = L.cross_entropy(logits, y).item() + 0.001 * L.center_loss(r, y, state).item()
    assert got == pytest.approx(expected, abs=1e-12)


def test_composite_gradient_is_linear():
    rng = np.random.default_rng(11)
    y = labels_with_pairs(rng, 8, 3)
    r0, logits0 = rng.standard_normal((8, 5)), rng.standard_normal((8, 3))
    lam = 0.37

    def grads(which):
        r, logits = Tensor(r0.copy(), requires_grad=True), Tensor(logits0.copy(), requires_grad=True)
        if which == "ce":
            loss = L.cross_entropy(logits, y)
        elif which == "metric":
            loss = L.triplet_loss(r, y, L.TripletConfig(3.0, "all_valid"))
        else:
            loss = L.composite_stage1_loss(logits, r, None, y, L.MetricLossConfig("triplet", lam),
                                           triplet=L.TripletConfig(3.0, "all_valid"))
        loss.backward()
        return r.grad, logits.grad

    ce_r, ce_l = grads("ce")
    m_r, _ = grads("metric")
    c_r, c_l = grads("composite")
    np.testing.assert_allclose(c_l, ce_l, atol=1e-10)
    np.testing.assert_allclose(c_r, ce_r + lam * m_r, atol=1e-10)


def test_composite_missing_input():
    with pytest.raises(ValueError, match="projections"):
        L.composite_stage1_loss(Tensor(np.zeros((2, 2))), None, None, [0, 0], L.MetricLossConfig("supcon", 1.0))


def test_metric_config_rejects_negative_lambda():
    with pytest.raises(ValueError):
        L.MetricLossConfig("center", -0.1)


# ---------------------------------------------------------------- properties


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_losses_batch_order_invariant_and_non_negative(seed):
    rng = np.random.default_rng(seed)
    B, K, d = 8, 3, 4
    y = labels_with_pairs(rng, B, K)
    logits, r = rng.standard_normal((B, K)), rng.standard_normal((B, d))
    z = unit_rows(rng, B, d)
    state = L.CenterState(K, d)
    state.centers.values = rng.standard_normal((K, d))
    perm = rng.permutation(B)
    counts = [50, 10, 3]

    def all_losses(p):
        lg, rr, zz, yy = Tensor(logits[p]), Tensor(r[p]), Tensor(z[p]), y[p]
        return [
            L.cross_entropy(lg, yy).item(),
            L.cross_entropy(lg, yy, [0.2, 1.0, 1.8]).item(),
            L.focal_loss(lg, yy, L.FocalConfig(2.0)).item(),
            L.focal_loss(lg, yy, L.FocalConfig(2.0, True, 0.99), counts).item(),
            L.ldam_loss(lg, yy, counts).item(),
            L.center_loss(rr, yy, state).item(),
            L.triplet_loss(rr, yy, L.TripletConfig(1.0, "all_valid")).item(),
            L.triplet_loss(rr, yy, L.TripletConfig(1.0, "batch_hard")).item(),
            L.supcon_loss(zz, yy).item(),
        ]

    base = all_losses(np.arange(B))
    assert all(v >= 0 for v in base)
    np.testing.assert_allclose(all_losses(perm), base, rtol=0, atol=1e-12)
