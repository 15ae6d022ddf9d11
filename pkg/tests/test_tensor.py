import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from casenet import tensor as T
from casenet.errors import ContractError, DimensionError, NumericalError
from casenet.tensor import Tensor, backward, finite_diff_check


def naive_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def naive_conv1d(x, w, b, stride, dilation):
    c_out, c_in, k = w.shape
    L = x.shape[1]
    n_out = (L - (k - 1) * dilation - 1) // stride + 1
    y = np.zeros((c_out, n_out))
    for c in range(c_out):
        for t in range(n_out):
            acc = b[c]
            for cp in range(c_in):
                for i in range(k):
                    acc += w[c, cp, i] * x[cp, t * stride + i * dilation]
            y[c, t] = acc
    return y


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    out = T.matmul(Tensor(np.eye(2)), Tensor([[3, 4], [5, 6]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_matches_triple_loop():
    a, b = np.array([[1.0, 2], [3, 4]]), np.array([[5.0], [6]])
    expected = naive_matmul(a, b)
    np.testing.assert_array_equal(expected, [[17], [39]])
    np.testing.assert_array_equal(T.matmul(Tensor(a), Tensor(b)).data, expected)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_matmul_broadcast_grad():
    rng = np.random.default_rng(0)
    H = rng.normal(size=(3, 4, 5))
    W = rng.normal(size=(2, 4))
    err = finite_diff_check(lambda w: T.reduce_sum(T.mul(T.matmul(w, Tensor(H)), Tensor(H[:, :2]))), W)
    assert err < 1e-6
    err = finite_diff_check(lambda h: T.reduce_sum(T.sigmoid(T.matmul(Tensor(W), h))), H)
    assert err < 1e-6


# ---------------------------------------------------------------- conv1d

def test_conv1d_delta_kernel_copies_input():
    y = T.conv1d(Tensor([[1, 2, 3, 4]]), Tensor([[[1, 0]]]), Tensor([0]))
    np.testing.assert_array_equal(y.data, [[1, 2, 3]])


def test_conv1d_dilation_direct_sum():
    x = np.array([[1.0, 2, 3, 4]])
    expected = [[x[0, 0] + x[0, 2], x[0, 1] + x[0, 3]]]
    y = T.conv1d(Tensor(x), Tensor([[[1, 1]]]), Tensor([0]), dilation=2)
    np.testing.assert_array_equal(y.data, expected)
    np.testing.assert_array_equal(y.data, [[4, 6]])


def test_conv1d_too_short():
    with pytest.raises(DimensionError):
        T.conv1d(Tensor(np.ones((1, 4))), Tensor(np.ones((1, 1, 3))), Tensor([0]), dilation=2)


@settings(max_examples=40, deadline=None)
@given(c_in=st.integers(1, 4), c_out=st.integers(1, 4), k=st.integers(1, 5),
       d=st.integers(1, 4), stride=st.integers(1, 3), extra=st.integers(0, 12),
       seed=st.integers(0, 2**32 - 1))
def test_conv1d_bit_exact_vs_naive(c_in, c_out, k, d, stride, extra, seed):
    rng = np.random.default_rng(seed)
    L = min((k - 1) * d + 1 + extra, 32)
    x = rng.integers(-9, 10, size=(c_in, L)).astype(float)
    w = rng.integers(-9, 10, size=(c_out, c_in, k)).astype(float)
    b = rng.integers(-9, 10, size=c_out).astype(float)
    y = T.conv1d(Tensor(x), Tensor(w), Tensor(b), stride=stride, dilation=d)
    np.testing.assert_array_equal(y.data, naive_conv1d(x, w, b, stride, d))


def test_conv1d_batched_grad():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 11))
    w = rng.normal(size=(4, 3, 3))
    b = rng.normal(size=4)
    r = rng.normal(size=(2, 4, 4))

    def f_of(which):
        def f(t):
            args = {"x": Tensor(x), "w": Tensor(w), "b": Tensor(b)}
            args[which] = t
            return T.reduce_sum(T.mul(T.conv1d(args["x"], args["w"], args["b"], stride=2, dilation=2), Tensor(r)))
        return f

    for which, val in (("x", x), ("w", w), ("b", b)):
        assert finite_diff_check(f_of(which), val) < 1e-6


# ---------------------------------------------------------------- masked softmax

def causal_sentinel(L):
    return Tensor(np.triu(np.full((L, L), T.MASK_VALUE), 1))


def test_masked_softmax_zero_scores_causal():
    p = T.masked_softmax(Tensor(np.zeros((3, 3))), causal_sentinel(3)).data
    np.testing.assert_allclose(p, [[1, 0, 0], [0.5, 0.5, 0], [1 / 3, 1 / 3, 1 / 3]], atol=1e-15)
    assert p[0, 1] == 0.0 and p[0, 2] == 0.0 and p[1, 2] == 0.0


def test_masked_softmax_closed_form():
    p = T.masked_softmax(Tensor([[0.0, math.log(2)], [0.0, 0.0]]), Tensor(np.zeros((2, 2)))).data
    np.testing.assert_allclose(p[0], [1 / 3, 2 / 3], rtol=1e-14)


def test_masked_softmax_accepts_true_neg_inf():
    m = np.where(np.triu(np.ones((4, 4)), 1) > 0, -np.inf, 0.0)
    p = T.masked_softmax(Tensor(np.random.default_rng(0).normal(size=(4, 4))), Tensor(m)).data
    assert np.all(p[np.triu_indices(4, 1)] == 0.0)


def test_masked_softmax_fully_masked_row_fails():
    m = np.zeros((2, 2))
    m[0, :] = T.MASK_VALUE
    with pytest.raises(ContractError):
        T.masked_softmax(Tensor(np.zeros((2, 2))), Tensor(m))


@settings(max_examples=30, deadline=None)
@given(L=st.integers(1, 20), seed=st.integers(0, 2**32 - 1), spread=st.floats(0.1, 50))
def test_masked_softmax_rows_normalized(L, seed, spread):
    s = np.random.default_rng(seed).normal(scale=spread, size=(2, L, L))
    p = T.masked_softmax(Tensor(s), causal_sentinel(L)).data
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)
    assert np.all(p[:, np.triu(np.ones((L, L), bool), 1)] == 0.0)


def test_masked_softmax_grad():
    rng = np.random.default_rng(3)
    s = rng.normal(size=(2, 5, 5))
    r = rng.normal(size=(2, 5, 5))
    assert finite_diff_check(lambda t: T.reduce_sum(T.mul(T.masked_softmax(t, causal_sentinel(5)), Tensor(r))), s) < 1e-6


# ---------------------------------------------------------------- elementwise, reductions

def test_sigmoid_relu_values():
    assert T.sigmoid(Tensor(0.0)).item() == 0.5
    np.testing.assert_array_equal(T.relu(Tensor([-3.0, 3.0])).data, [0, 3])


def test_channel_broadcast():
    a = Tensor(np.array([0.5, 1.0]).reshape(2, 1))
    out = T.mul(a, Tensor(np.ones((2, 4)))).data
    np.testing.assert_array_equal(out, [[0.5] * 4, [1.0] * 4])


def test_non_broadcastable_shapes():
    with pytest.raises(DimensionError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))
    with pytest.raises(DimensionError):
        T.mul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_reduce_mean():
    assert T.reduce_mean(Tensor([1.0, 2, 3, 4])).item() == 2.5
    c = np.tile(np.array([[1.5], [-2.0]]), (1, 7))
    np.testing.assert_array_equal(T.reduce_mean(Tensor(c), axis=1).data, [1.5, -2.0])
    x = Tensor(np.arange(6.0), requires_grad=True)
    backward(T.reduce_mean(x))
    np.testing.assert_allclose(x.grad, np.full(6, 1 / 6))


def test_reduce_mean_bad_axis():
    with pytest.raises(DimensionError):
        T.reduce_mean(Tensor(np.ones((2, 2))), axis=2)


# ---------------------------------------------------------------- backward

def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
    backward(T.reduce_sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_square():
    x = Tensor([1.0, 2.0], requires_grad=True)
    backward(T.reduce_sum(T.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [2, 4])


def test_backward_accumulates_across_calls():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = T.reduce_sum(T.mul(x, x))
    backward(loss)
    backward(loss)
    np.testing.assert_array_equal(x.grad, [4, 8])


def test_backward_non_scalar():
    with pytest.raises(ContractError):
        backward(Tensor(np.ones(2), requires_grad=True))


def test_diamond_graph_sums_paths():
    # f = sum(s * sigmoid(s)), s = 3x: both branches share s
    x0 = np.array([0.3, -1.2, 2.0])
    x = Tensor(x0, requires_grad=True)
    s = T.scale(x, 3.0)
    backward(T.reduce_sum(T.mul(s, T.sigmoid(s))))
    sig = 1 / (1 + np.exp(-3 * x0))
    oracle = 3 * (sig + 3 * x0 * sig * (1 - sig))
    np.testing.assert_allclose(x.grad, oracle, rtol=1e-12)


def test_results_do_not_alias_inputs():
    x = Tensor(np.arange(6.0))
    y = T.reshape(x, (2, 3))
    z = T.transpose(y, (1, 0))
    assert not np.shares_memory(x.data, y.data)
    assert not np.shares_memory(y.data, z.data)


def test_graph_insertion_order_is_topological():
    x = Tensor([1.0], requires_grad=True)
    y = T.sigmoid(T.mul(x, x))
    z = T.add(y, x)
    g = T.Graph.from_root(T.reduce_sum(z))
    pos = {n.node_id: i for i, n in enumerate(g.nodes)}
    for n in g.nodes:
        for p in n._parents:
            if p.requires_grad:
                assert pos[p.node_id] < pos[n.node_id]


# ---------------------------------------------------------------- finite-difference oracle

def test_fd_sigmoid_sum():
    x = np.random.default_rng(5).normal(size=3)
    assert finite_diff_check(lambda t: T.reduce_sum(T.sigmoid(t)), x) < 1e-6


def test_fd_nll_through_log_softmax():
    rng = np.random.default_rng(6)
    logits = rng.normal(size=(4, 3))
    onehot = np.eye(3)[[0, 2, 1, 1]]
    f = lambda t: T.scale(T.reduce_sum(T.mul(T.log_softmax(t, 1), Tensor(onehot))), -0.25)
    assert finite_diff_check(f, logits) < 1e-4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_fd_reports_nan_index():
    with pytest.raises(NumericalError):
        finite_diff_check(lambda t: T.reduce_sum(T.sqrt(t)), np.array([1.0, 1e-7]), eps=1e-5)


ELEMENTWISE = {
    "add": lambda a, b: T.add(a, b),
    "sub": lambda a, b: T.sub(a, b),
    "mul": lambda a, b: T.mul(a, b),
    "div": lambda a, b: T.div(a, T.add(T.mul(b, b), 1.0)),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
@pytest.mark.parametrize("seed", range(10))
def test_fd_binary_ops(name, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 1))
    op = ELEMENTWISE[name]
    r = rng.normal(size=(2, 3, 4))
    assert finite_diff_check(lambda t: T.reduce_sum(T.mul(op(t, Tensor(b)), Tensor(r))), a) < 1e-4
    assert finite_diff_check(lambda t: T.reduce_sum(T.mul(op(Tensor(a), t), Tensor(r))), b) < 1e-4


UNARY = {
    "sigmoid": T.sigmoid,
    "relu": T.relu,
    "sqrt": lambda t: T.sqrt(T.add(T.mul(t, t), 0.5)),
    "scale": lambda t: T.scale(t, -2.5),
    "mean_axis": lambda t: T.reduce_mean(t, axis=1, keepdims=True),
    "sum_axis": lambda t: T.reduce_sum(t, axis=2),
    "log_softmax": lambda t: T.log_softmax(t, axis=1),
    "transpose": lambda t: T.transpose(t, (2, 0, 1)),
    "reshape": lambda t: T.reshape(t, (4, 6)),
    "pad": lambda t: T.pad_time(t, 2, 1),
    "concat": lambda t: T.concat([t, T.sigmoid(t)], axis=1),
    "clamp_min": lambda t: T.clamp_min(t, 0.1),
    "layer_norm": lambda t: T.layer_norm(t, Tensor([1.5, -0.5, 2.0]), Tensor([0.1, 0.2, 0.3])),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", range(10))
def test_fd_unary_ops(name, seed):
    rng = np.random.default_rng(100 + seed)
    x = rng.normal(size=(2, 3, 4))
    out_shape = UNARY[name](Tensor(x)).shape
    r = rng.normal(size=out_shape)
    assert finite_diff_check(lambda t: T.reduce_sum(T.mul(UNARY[name](t), Tensor(r))), x) < 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_fd_layer_norm_params(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 4))
    g, b = rng.normal(size=3), rng.normal(size=3)
    r = rng.normal(size=(2, 3, 4))
    f = lambda t: T.reduce_sum(T.mul(T.layer_norm(Tensor(x), t, Tensor(b)), Tensor(r)))
    assert finite_diff_check(f, g) < 1e-4
    f = lambda t: T.reduce_sum(T.mul(T.layer_norm(Tensor(x), Tensor(g), t), Tensor(r)))
    assert finite_diff_check(f, b) < 1e-4


def test_dropout_identity_without_rng_and_mask_grad():
    x = Tensor(np.ones((4, 5)), requires_grad=True)
    assert T.dropout(x, 0.5, None) is x
    y = T.dropout(x, 0.5, np.random.default_rng(0))
    vals = set(np.unique(y.data))
    assert vals <= {0.0, 2.0}
    backward(T.reduce_sum(y))
    np.testing.assert_array_equal(x.grad, y.data)
