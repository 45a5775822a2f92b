import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from langroute import numerics as nx
from langroute.numerics import GradientTape, Tensor, finite_diff_grad


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b)))


def grad_of(fn, *arrays):
    """Reverse-mode gradients of scalar fn(*tensors) w.r.t. every input."""
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    with GradientTape() as tape:
        out = fn(*ts)
        tape.backward(out)
    return [tape.grad(t) for t in ts]


def fd_of(fn, arrays, k, eps=1e-5):
    def f(x):
        args = [Tensor(a) for a in arrays]
        args[k] = x
        return fn(*args)

    return finite_diff_grad(f, Tensor(arrays[k]), eps).data


def test_matmul_identity_and_hand_values():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(nx.matmul(Tensor(np.eye(2)), a).data, a.data)
    assert nx.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(nx.ShapeError):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_grad_of_summed_product_is_ones_times_b_transpose():
    rng = np.random.default_rng(0)
    A, B = rng.normal(size=(3, 4)), rng.normal(size=(4, 5))
    ga, _ = grad_of(lambda a, b: nx.sum_all(nx.matmul(a, b)), A, B)
    assert np.allclose(ga, np.ones((3, 5)) @ B.T, atol=1e-12)
    fd = fd_of(lambda a, b: nx.sum_all(nx.matmul(a, b)), [A, B], 0)
    assert rel_err(ga, fd) < 1e-4


def test_cross_entropy_uniform_is_log_v():
    loss = nx.softmax_cross_entropy(Tensor(np.zeros((1, 4))), np.array([2]), np.array([True]))
    assert loss.item() == pytest.approx(math.log(4), abs=1e-12)


def test_cross_entropy_dominant_class_tends_to_zero():
    z = np.zeros((1, 4))
    z[0, 1] = 800.0
    loss = nx.softmax_cross_entropy(Tensor(z), np.array([1]), np.array([True]))
    assert loss.item() < 1e-300 or loss.item() == 0.0


def test_cross_entropy_matches_direct_formula():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(3, 5))
    t = np.array([4, 0, 2])
    mask = np.array([True, False, True])
    oracle = np.mean([-(z[i, t[i]] - math.log(np.exp(z[i]).sum())) for i in (0, 2)])
    assert abs(nx.softmax_cross_entropy(Tensor(z), t, mask).item() - oracle) < 1e-10


def test_cross_entropy_gradient_rule():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(3, 5))
    t = np.array([1, 3, 0])
    mask = np.array([True, True, False])
    (g,) = grad_of(lambda x: nx.softmax_cross_entropy(x, t, mask), z)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    expect = (p - np.eye(5)[t]) / 2
    expect[2] = 0.0
    assert np.allclose(g, expect, atol=1e-14)


def test_cross_entropy_all_masked_is_an_error():
    with pytest.raises(ValueError, match="degenerate"):
        nx.softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 1]), np.array([False, False]))


def test_backward_scalar_examples():
    (g,) = grad_of(lambda x: nx.square(x), np.array(3.0))
    assert float(g) == 6.0
    (g,) = grad_of(lambda x: nx.sum_all(nx.relu(x)), np.array([-1.0, 2.0]))
    assert g.tolist() == [0.0, 1.0]


def test_relu_subgradient_at_zero_is_zero():
    (g,) = grad_of(lambda x: nx.sum_all(nx.relu(x)), np.array([0.0]))
    assert g.tolist() == [0.0]


def test_backward_rejects_non_scalar():
    with GradientTape() as tape:
        y = nx.scale(Tensor(np.ones(3), requires_grad=True), 2.0)
        with pytest.raises(nx.TapeError):
            tape.backward(y)


def test_intermediate_gradients_are_retained():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    with GradientTape() as tape:
        h = nx.relu(x)
        loss = nx.sum_all(nx.scale(h, 2.0))
        tape.backward(loss)
    assert tape.grad(h).tolist() == [2.0, 2.0, 2.0]
    assert tape.grad(x).tolist() == [2.0, 0.0, 2.0]


def test_training_tape_drops_intermediates_but_keeps_leaves():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with GradientTape(retain_intermediates=False) as tape:
        h = nx.scale(x, 3.0)
        tape.backward(nx.sum_all(h))
    assert tape.grad(x).tolist() == [3.0, 3.0]
    assert h.id not in tape.grads


def test_non_finite_values_raise():
    with pytest.raises(nx.NumericError):
        nx.scale(Tensor([1e308]), 10.0)


def test_finite_diff_examples():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(2, 3)))
    assert np.allclose(finite_diff_grad(nx.sum_all, x, 1e-5).data, 1.0, atol=1e-9)
    g = finite_diff_grad(lambda t: nx.square(t), Tensor(np.array(2.0)), 1e-5)
    assert abs(g.item() - 4.0) < 1e-8
    with pytest.raises(ValueError):
        finite_diff_grad(nx.sum_all, x, 0.0)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(4)
    p = nx.softmax(Tensor(rng.normal(size=(5, 7)) * 10)).data
    assert np.max(np.abs(p.sum(axis=1) - 1.0)) < 1e-12
    keep = np.tril(np.ones((5, 5), dtype=bool))
    p = nx.softmax(Tensor(rng.normal(size=(5, 5))), keep=keep).data
    assert np.max(np.abs(p.sum(axis=1) - 1.0)) < 1e-12
    assert np.all(p[~keep] == 0.0)


def _mlp_loss(w1, b1, w2, x, t):
    h = nx.relu(nx.linear(x, w1, b1))
    return nx.softmax_cross_entropy(nx.linear(h, w2), t)


def test_mlp_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    arrays = [rng.normal(size=(6, 4)), rng.normal(size=6), rng.normal(size=(3, 6))]
    x = Tensor(rng.normal(size=(5, 4)))
    t = rng.integers(0, 3, 5)
    fn = lambda w1, b1, w2: _mlp_loss(w1, b1, w2, x, t)  # noqa: E731
    grads = grad_of(fn, *arrays)
    for k, g in enumerate(grads):
        assert rel_err(g, fd_of(fn, arrays, k)) < 1e-4


shapes = st.tuples(st.integers(1, 8), st.integers(1, 8))

UNARY = {
    "relu": lambda a: nx.relu(a),
    "square": lambda a: nx.square(a),
    "scale": lambda a: nx.scale(a, -1.7),
    "softmax": lambda a: nx.softmax(a),
    "transpose": lambda a: nx.transpose(a, (1, 0)),
    "mean": lambda a: nx.mean_all(a),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@settings(max_examples=15, deadline=None)
@given(shape=shapes, seed=st.integers(0, 2**16))
def test_unary_ops_against_finite_differences(name, shape, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=shape)
    if name == "relu":
        a = np.where(np.abs(a) < 1e-3, 0.5, a)  # keep away from the kink
    w = rng.normal(size=np.asarray(UNARY[name](Tensor(a)).data).shape)
    fn = lambda x: nx.sum_all(nx.mul(UNARY[name](x), Tensor(w)))  # noqa: E731
    (g,) = grad_of(fn, a)
    assert rel_err(g, fd_of(fn, [a], 0)) < 1e-4


BINARY = {
    "add": (lambda a, b: nx.add(a, b), lambda m, n: ((m, n), (m, n))),
    "add_bias": (lambda a, b: nx.add(a, b), lambda m, n: ((m, n), (n,))),
    "sub": (lambda a, b: nx.sub(a, b), lambda m, n: ((m, n), (m, n))),
    "mul": (lambda a, b: nx.mul(a, b), lambda m, n: ((m, n), (1, n))),
    "matmul": (lambda a, b: nx.matmul(a, b), lambda m, n: ((m, n), (n, m))),
    "linear": (lambda a, b: nx.linear(a, b), lambda m, n: ((m, n), (m, n))),
}


@pytest.mark.parametrize("name", sorted(BINARY))
@settings(max_examples=15, deadline=None)
@given(shape=shapes, seed=st.integers(0, 2**16))
def test_binary_ops_against_finite_differences(name, shape, seed):
    op, mk = BINARY[name]
    rng = np.random.default_rng(seed)
    sa, sb = mk(*shape)
    a, b = rng.normal(size=sa), rng.normal(size=sb)
    w = rng.normal(size=op(Tensor(a), Tensor(b)).shape)
    fn = lambda x, y: nx.sum_all(nx.mul(op(x, y), Tensor(w)))  # noqa: E731
    grads = grad_of(fn, a, b)
    for k in (0, 1):
        assert rel_err(grads[k], fd_of(fn, [a, b], k)) < 1e-4


@settings(max_examples=15, deadline=None)
@given(shape=st.tuples(st.integers(1, 8), st.integers(2, 8)), seed=st.integers(0, 2**16))
def test_layer_norm_against_finite_differences(shape, seed):
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=shape), rng.normal(size=shape[1]), rng.normal(size=shape[1])]
    w = rng.normal(size=shape)
    fn = lambda x, g, b: nx.sum_all(nx.mul(nx.layer_norm(x, g, b), Tensor(w)))  # noqa: E731
    grads = grad_of(fn, *arrays)
    for k in range(3):
        assert rel_err(grads[k], fd_of(fn, arrays, k)) < 1e-4


@settings(max_examples=15, deadline=None)
@given(shape=shapes, seed=st.integers(0, 2**16))
def test_indexing_ops_against_finite_differences(shape, seed):
    rng = np.random.default_rng(seed)
    m, n = shape
    W = rng.normal(size=(m, n))
    ids = rng.integers(0, m, size=(2, 3))
    idx = rng.permutation(n)[: max(1, n // 2)]
    w1 = rng.normal(size=(2, 3, n))
    w2 = rng.normal(size=(m, idx.size))
    fn = lambda x: nx.add(nx.sum_all(nx.mul(nx.embedding(x, ids), Tensor(w1))),  # noqa: E731
                          nx.sum_all(nx.mul(nx.take(x, idx, axis=1), Tensor(w2))))
    (g,) = grad_of(fn, W)
    assert rel_err(g, fd_of(fn, [W], 0)) < 1e-4


def test_backward_is_bit_deterministic():
    rng = np.random.default_rng(6)
    arrays = [rng.normal(size=(6, 4)), rng.normal(size=6), rng.normal(size=(3, 6))]
    x = Tensor(rng.normal(size=(5, 4)))
    t = rng.integers(0, 3, 5)
    g1 = grad_of(lambda *a: _mlp_loss(*a, x, t), *arrays)
    g2 = grad_of(lambda *a: _mlp_loss(*a, x, t), *arrays)
    for a, b in zip(g1, g2):
        assert np.array_equal(a, b)
