import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tailforge import autodiff as ad
from tailforge.autodiff import Tensor


def rand(rng, *shape, requires_grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad=requires_grad)


# ---------------------------------------------------------------- forward values


def test_softmax_symmetric():
    np.testing.assert_array_equal(ad.softmax(Tensor([[0.0, 0.0]])).values, [[0.5, 0.5]])


def test_l2_normalize_345():
    np.testing.assert_allclose(ad.l2_normalize(Tensor([[3.0, 4.0]])).values, [[0.6, 0.8]], rtol=0, atol=1e-15)


def test_matmul_identity():
    A = np.random.default_rng(0).standard_normal((3, 3))
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(3)), Tensor(A)).values, A)


def test_pairwise_distance_matches_direct():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((4, 3)), rng.standard_normal((5, 3))
    direct = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    np.testing.assert_allclose(ad.pairwise_sq_dist(Tensor(a), Tensor(b)).values, direct, atol=1e-12)


def test_pairwise_distance_clamps_roundoff():
    x = Tensor(np.full((2, 3), 1e8 / 3))
    assert np.all(ad.pairwise_sq_dist(x, x).values >= 0)


def test_conv2d_matches_loop():
    rng = np.random.default_rng(2)
    x, w, b = rng.standard_normal((2, 3, 5, 5)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
    out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1).values
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 5, 5))
    for n in range(2):
        for o in range(4):
            for i in range(5):
                for j in range(5):
                    ref[n, o, i, j] = (xp[n, :, i : i + 3, j : j + 3] * w[o]).sum() + b[o]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_concat_and_gather():
    a, b = Tensor([[1.0, 2.0]]), Tensor([[3.0, 4.0], [5.0, 6.0]])
    c = ad.concat([a, b], axis=0)
    np.testing.assert_array_equal(c.values, [[1, 2], [3, 4], [5, 6]])
    np.testing.assert_array_equal(ad.gather_rows(c, [2, 0, 2]).values, [[5, 6], [1, 2], [5, 6]])


# ---------------------------------------------------------------- errors


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ad.ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    with pytest.raises(ad.ShapeError, match="add"):
        ad.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


def test_backward_needs_scalar_root():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(ad.scale(x, 2.0))


def test_grad_check_rejects_non_finite():
    x = Tensor([-1.0, 2.0])
    with pytest.raises(ad.NonFiniteError):
        ad.grad_check(lambda t: ad.sum(ad.log(t)), x)


# ---------------------------------------------------------------- backward


def test_grad_of_sum_is_ones():
    x = Tensor(np.random.default_rng(3).standard_normal((2, 3, 4)), requires_grad=True)
    ad.sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_grad_of_mean_square():
    x = Tensor([1.0, 2.0], requires_grad=True)
    ad.mean(ad.mul(x, x)).backward()
    np.testing.assert_allclose(x.grad, [1.0, 2.0], rtol=0, atol=1e-15)


def test_relu_gate():
    x = Tensor([-1.0, 2.0], requires_grad=True)
    ad.sum(ad.relu(x)).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor([0.0], requires_grad=True)
    ad.sum(ad.relu(x)).backward()
    assert x.grad[0] == 0.0


def test_backward_twice_doubles():
    x = Tensor([1.5, -0.5], requires_grad=True)
    loss = ad.sum(ad.mul(x, x))
    loss.backward()
    once = x.grad.copy()
    loss.backward()
    np.testing.assert_array_equal(x.grad, 2 * once)


def test_grad_zero_after_creation_and_zero_grad():
    x = Tensor(np.ones((3, 2)), requires_grad=True)
    assert not x.grad.any()
    ad.sum(x).backward()
    x.zero_grad()
    assert not x.grad.any() and x.grad.shape == x.shape


def test_shared_input_accumulates():
    x = Tensor([2.0], requires_grad=True)
    ad.sum(ad.add(ad.mul(x, x), x)).backward()
    np.testing.assert_allclose(x.grad, [5.0])


def test_no_edges_into_constants():
    w = Tensor([1.0, 2.0])
    x = Tensor([3.0, 4.0], requires_grad=True)
    ad.sum(ad.mul(w, x)).backward()
    assert not w.grad.any()


def test_graph_is_topologically_ordered():
    rng = np.random.default_rng(4)
    x = rand(rng, 3, 4)
    y = ad.sum(ad.softmax(ad.matmul(x, rand(rng, 4, 2))))
    g = ad.ComputationGraph.trace(y)
    position = {rec.output: i for i, rec in enumerate(g.nodes)}
    for i, rec in enumerate(g.nodes):
        assert all(position[inp] < i for inp in rec.inputs)
    assert g.nodes[-1].output == y.node_id


# ---------------------------------------------------------------- grad checks per primitive


def _away_from_zero(rng, shape, gap=1e-3):
    v = rng.standard_normal(shape)
    return np.where(np.abs(v) < gap, np.sign(v + 1e-12) * (gap + np.abs(v)), v)


def _case(name, rng):
    """Return (scalar function, input shape); random constants are drawn once, here."""
    c = lambda *shape: Tensor(rng.standard_normal(shape))  # noqa: E731
    if name == "add":
        b = c(1, 4)
        return (lambda x: ad.sum(ad.mul(ad.add(x, b), x))), (3, 4)
    if name == "sub":
        return (lambda x: ad.sum(ad.mul(ad.sub(x, 1.3), x))), (3, 4)
    if name == "mul":
        return (lambda x: ad.sum(ad.mul(ad.mul(x, x), x))), (3, 4)
    if name == "scale":
        return (lambda x: ad.sum(ad.mul(ad.scale(x, -2.5), x))), (5,)
    if name == "matmul":
        W = c(4, 2)
        return (lambda x: ad.sum(ad.mul(ad.matmul(x, W), 1.7))), (3, 4)
    if name == "exp":
        return (lambda x: ad.sum(ad.exp(x))), (3, 4)
    if name == "log":
        return (lambda x: ad.sum(ad.log(ad.add(ad.mul(x, x), 0.5)))), (3, 4)
    if name == "power":
        return (lambda x: ad.sum(ad.power(ad.add(ad.mul(x, x), 0.1), 1.7))), (3, 4)
    if name == "mean":
        return (lambda x: ad.mean(ad.mul(ad.mean(x, axis=1), ad.sum(x, axis=1)))), (3, 4)
    if name in ("softmax", "log_softmax", "l2_normalize"):
        op, probe = getattr(ad, name), c(3, 4)
        return (lambda x: ad.sum(ad.mul(op(x), probe))), (3, 4)
    if name == "pairwise":
        probe = Tensor(rng.random((3, 3)))
        return (lambda x: ad.sum(ad.mul(ad.pairwise_sq_dist(x, x), probe))), (3, 4)
    if name == "gather":
        return (lambda x: ad.sum(ad.mul(ad.gather_rows(x, [0, 2, 2]), ad.gather_rows(x, [1, 1, 0])))), (3, 4)
    if name == "concat":
        probe = c(3, 8)
        return (lambda x: ad.sum(ad.mul(ad.concat([x, ad.scale(x, 2.0)], axis=1), probe))), (3, 4)
    if name == "reshape":
        probe = c(4, 3)
        return (lambda x: ad.sum(ad.mul(ad.reshape(x, (4, 3)), probe))), (3, 4)
    if name == "conv2d":
        w, b, probe = c(2, 2, 3, 3), c(2), c(2, 2, 4, 4)
        return (lambda x: ad.sum(ad.mul(ad.conv2d(x, w, b, padding=1), probe))), (2, 2, 4, 4)
    raise KeyError(name)


PRIMITIVES = ["add", "sub", "mul", "scale", "matmul", "exp", "log", "power", "mean", "softmax", "log_softmax",
              "l2_normalize", "pairwise", "gather", "concat", "reshape", "conv2d"]


@pytest.mark.parametrize("name", PRIMITIVES)
def test_primitive_grad_check(name):
    rng = np.random.default_rng(PRIMITIVES.index(name))
    f, shape = _case(name, rng)
    assert ad.grad_check(f, Tensor(rng.standard_normal(shape))) < 1e-4


def test_relu_grad_check_away_from_kink():
    rng = np.random.default_rng(5)
    w = Tensor(rng.standard_normal((3, 4)))
    assert ad.grad_check(lambda x: ad.sum(ad.mul(ad.relu(x), w)), Tensor(_away_from_zero(rng, (3, 4)))) < 1e-4


def test_conv2d_grad_wrt_kernel_and_bias():
    rng = np.random.default_rng(6)
    x = Tensor(rng.standard_normal((2, 3, 5, 5)))
    w = Tensor(rng.standard_normal((4, 3, 3, 3)))
    b = Tensor(rng.standard_normal(4))
    probe = Tensor(rng.standard_normal((2, 4, 3, 3)))
    assert ad.grad_check(lambda t: ad.sum(ad.mul(ad.conv2d(x, t, b), probe)), w) < 1e-4
    assert ad.grad_check(lambda t: ad.sum(ad.mul(ad.conv2d(x, w, t), probe)), b) < 1e-4


def test_grad_check_linear_is_exact():
    x = Tensor(np.random.default_rng(7).standard_normal((4, 3)))
    assert ad.grad_check(lambda t: ad.sum(t), x) < 1e-10


# ---------------------------------------------------------------- properties


finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=finite))
def test_softmax_rows_sum_to_one_and_log_matches(x):
    s = ad.softmax(Tensor(x)).values
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(ad.log_softmax(Tensor(x)).values, np.log(s), atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_gradient_linearity(seed, a, b):
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((3, 4))
    W = Tensor(rng.standard_normal((4, 2)))

    def f(x):
        return ad.sum(ad.log_softmax(ad.matmul(x, W)))

    def g(x):
        return ad.mean(ad.exp(ad.scale(x, 0.3)))

    grads = []
    for fn in (f, g, lambda x: ad.add(ad.scale(f(x), a), ad.scale(g(x), b))):
        x = Tensor(x0.copy(), requires_grad=True)
        fn(x).backward()
        grads.append(x.grad)
    np.testing.assert_allclose(grads[2], a * grads[0] + b * grads[1], rtol=0, atol=1e-10)


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(8)
        x = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
        W = Tensor(rng.standard_normal((6, 3)), requires_grad=True)
        loss = ad.sum(ad.log_softmax(ad.relu(ad.matmul(x, W))))
        loss.backward()
        return loss.values.copy(), x.grad.copy(), W.grad.copy()

    for a, b in zip(run(), run()):
        assert a.tobytes() == b.tobytes()
