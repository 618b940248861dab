import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from memforecast import tensor as T
from memforecast.errors import ConfigurationError, ContractError, DimensionError, TapeError
from memforecast.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    b = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), Tensor(b)).data, b)


def test_matmul_orthogonal_rows():
    assert T.matmul(Tensor([[1.0, 0.0]]), Tensor([[0.0], [1.0]])).data.tolist() == [[0.0]]


def test_matmul_matches_triple_loop(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    expected = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for p in range(4):
                expected[i, j] += a[i, p] * b[p, j]
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, expected, rtol=0, atol=1e-12)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_records_only_when_needed():
    T.reset_tape()
    T.matmul(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))))
    assert len(T.current_tape()) == 0
    T.matmul(leaf(np.ones((2, 2))), Tensor(np.ones((2, 2))))
    assert len(T.current_tape()) == 1
    T.reset_tape()


# ---------------------------------------------------------------- conv1d

def conv_loop(x, k):
    L = x.shape[0]
    w, _, d_out = k.shape
    pad = (w - 1) // 2
    out = np.zeros((L, d_out))
    for t in range(L):
        for j in range(w):
            src = (t + j - pad) % L
            for o in range(d_out):
                out[t, o] += x[src] @ k[j, :, o]
    return out


def test_conv1d_identity_kernel(rng):
    x = rng.standard_normal((6, 3))
    k = np.eye(3)[None]
    np.testing.assert_array_equal(T.conv1d(Tensor(x), Tensor(k)).data, x)


def test_conv1d_constant_input_gives_constant_output(rng):
    x = np.full((7, 2), 1.5)
    out = T.conv1d(Tensor(x), Tensor(rng.standard_normal((3, 2, 4)))).data
    np.testing.assert_allclose(out, np.broadcast_to(out[0], out.shape), atol=1e-14)


def test_conv1d_matches_wraparound_loop(rng):
    x = rng.standard_normal((5, 2))
    k = rng.standard_normal((3, 2, 4))
    np.testing.assert_allclose(T.conv1d(Tensor(x), Tensor(k)).data, conv_loop(x, k), atol=1e-12)


def test_conv1d_width_exceeding_length():
    with pytest.raises(ConfigurationError):
        T.conv1d(Tensor(np.zeros((2, 1))), Tensor(np.zeros((3, 1, 1))))


# ---------------------------------------------------------------- softmax

def test_softmax_uniform_row():
    np.testing.assert_allclose(T.softmax_rows(Tensor(np.full((1, 4), 3.0))).data, 0.25, atol=1e-15)


def test_softmax_closed_form():
    # e^0 / (e^0 + e^ln3) = 1/4
    np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, math.log(3.0)]])).data, [[0.25, 0.75]], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    y = T.softmax_rows(Tensor(x)).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-9)
    np.testing.assert_allclose(T.softmax_rows(Tensor(x + c)).data, y, atol=1e-9)


# ---------------------------------------------------------------- layer stats

def test_layer_stats_hand_values():
    mu, sigma = T.layer_stats(Tensor([[1.0, 2.0, 3.0]]))
    assert mu.data[0] == pytest.approx(2.0, abs=1e-15)
    assert sigma.data[0] == pytest.approx(math.sqrt(2.0 / 3.0 + T.LN_EPS), abs=1e-15)
    # mpmath: sqrt(2/3 + 1e-5)
    assert sigma.data[0] == pytest.approx(0.8165027046291192, abs=1e-15)


def test_layer_stats_constant_row():
    mu, sigma = T.layer_stats(Tensor([[4.0, 4.0, 4.0, 4.0]]))
    assert mu.data[0] == 4.0
    assert sigma.data[0] == pytest.approx(math.sqrt(T.LN_EPS))


@given(st.floats(-5, 5), st.floats(-5, 5))
def test_layer_stats_mean_is_affine(a, b):
    row = np.array([[0.3, -1.2, 2.5, 0.0]])
    mu, _ = T.layer_stats(Tensor(row))
    mu2, _ = T.layer_stats(Tensor(a * row + b))
    assert mu2.data[0] == pytest.approx(a * mu.data[0] + b, abs=1e-12)


# ---------------------------------------------------------------- pointwise

def test_pointwise_values():
    assert T.pointwise("sigmoid", Tensor(0.0)).data == 0.5
    assert T.pointwise("tanh", Tensor(0.0)).data == 0.0
    assert T.tanh(Tensor(40.0)).data == pytest.approx(1.0, abs=1e-9)
    # tanh-approximate GELU at 1, evaluated with mpmath at 40 digits
    assert T.pointwise("gelu", Tensor(1.0)).data == pytest.approx(0.8411919906082767, abs=1e-12)
    assert abs(T.gelu(Tensor(1.0)).data - 0.8412) < 1e-3


def test_pointwise_shape_mismatch():
    with pytest.raises(DimensionError):
        T.pointwise("add", Tensor(np.zeros(3)), Tensor(np.zeros((3, 1))))
    with pytest.raises(DimensionError):
        T.mul(Tensor(np.zeros((2, 2))), Tensor(np.zeros((1, 2))))


def test_pointwise_unknown_op():
    with pytest.raises(ConfigurationError):
        T.pointwise("relu", Tensor(0.0))


def test_scalar_broadcast_only():
    x = Tensor(np.arange(3.0))
    np.testing.assert_array_equal((x * 2.0 + 1.0).data, [1.0, 3.0, 5.0])
    np.testing.assert_array_equal((1.0 - x).data, [1.0, 0.0, -1.0])


def test_sigmoid_extreme_inputs_are_finite():
    y = T.sigmoid(Tensor([-1000.0, 0.0, 1000.0])).data
    assert np.all(np.isfinite(y))
    np.testing.assert_array_equal(y, [0.0, 0.5, 1.0])


# ---------------------------------------------------------------- dropout

def test_dropout_rate_zero_is_identity():
    x = Tensor(np.arange(5.0))
    assert T.dropout(x, 0.0, 0).data is x.data


def test_dropout_eval_is_identity():
    x = Tensor(np.arange(5.0))
    assert T.dropout(x, 0.5, 0, training=False) is x


def test_dropout_zero_fraction():
    y = T.dropout(Tensor(np.ones(10**6)), 0.5, 7).data
    assert abs(np.mean(y == 0.0) - 0.5) < 0.005
    assert set(np.unique(y)) <= {0.0, 2.0}


def test_dropout_unbiased_monte_carlo():
    x = np.array([0.5, -1.0, 2.0, 3.0])
    rng = np.random.default_rng(3)
    acc = np.zeros_like(x)
    n = 10_000
    for _ in range(n):
        acc += T.dropout(Tensor(x), 0.3, rng).data
    np.testing.assert_allclose(acc / n, x, rtol=0.02)


def test_dropout_seed_reproducible():
    x = Tensor(np.linspace(0, 1, 100))
    assert np.array_equal(T.dropout(x, 0.4, 11).data, T.dropout(x, 0.4, 11).data)


def test_dropout_rate_one_rejected():
    with pytest.raises(ConfigurationError):
        T.dropout(Tensor(np.ones(3)), 1.0, 0)


# ---------------------------------------------------------------- concat

def test_concat_rows_order_and_roundtrip(rng):
    a = rng.standard_normal((1, 2))
    b = rng.standard_normal((1, 2))
    c = T.concat_rows(Tensor(a), Tensor(b)).data
    assert c.shape == (2, 2)
    np.testing.assert_array_equal(c[:1], a)
    np.testing.assert_array_equal(c[1:], b)
    cc = T.concat_rows(Tensor(a), Tensor(b))
    np.testing.assert_array_equal(T.slice_rows(cc, 0, 1).data, a)
    np.testing.assert_array_equal(T.slice_rows(cc, 1, 2).data, b)


def test_concat_with_empty():
    a = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(T.concat_rows(Tensor(a), Tensor(np.zeros((0, 2)))).data, a)


def test_concat_width_mismatch():
    with pytest.raises(DimensionError):
        T.concat_rows(Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 3))))


# ---------------------------------------------------------------- backward

def test_backward_sum_gives_ones():
    x = leaf(np.arange(4.0))
    T.backward(T.sum_all(x))
    np.testing.assert_array_equal(x.grad, np.ones(4))


def test_backward_square_gives_2x():
    x = leaf([1.0, -2.0, 3.0])
    T.backward(T.sum_all(T.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [2.0, -4.0, 6.0])


def test_backward_non_scalar_rejected():
    x = leaf(np.ones(3))
    with pytest.raises(ContractError):
        T.backward(T.scale(x, 2.0))
    T.reset_tape()


def test_backward_twice_rejected():
    x = leaf(np.ones(3))
    loss = T.sum_all(T.mul(x, x))
    T.backward(loss)
    with pytest.raises(TapeError):
        T.backward(loss)


def test_backward_clears_tape_and_accumulates_across_passes():
    x = leaf([1.0, 2.0])
    T.backward(T.sum_all(x))
    assert len(T.current_tape()) == 0
    T.backward(T.sum_all(T.scale(x, 3.0)))
    np.testing.assert_array_equal(x.grad, [4.0, 4.0])


def test_tape_topological_order(rng):
    x = leaf(rng.standard_normal((2, 2)))
    T.reset_tape()
    y = T.tanh(T.matmul(x, x))
    T.sum_all(T.add(y, x))
    nodes = T.current_tape().nodes
    seen = set()
    for nd in nodes:
        for inp in nd.inputs:
            assert inp._node is None or id(inp) in seen
        seen.add(id(nd.output))
    T.reset_tape()


def test_no_grad_records_nothing():
    x = leaf(np.ones(2))
    T.reset_tape()
    with T.no_grad():
        y = T.sum_all(T.mul(x, x))
    assert not y.requires_grad
    assert len(T.current_tape()) == 0


# ---------------------------------------------------------------- finite-difference checks

def _rand(rng, *shape):
    return Tensor(rng.standard_normal(shape))


PRIMITIVES = {
    "matmul": (lambda a, b: T.matmul(a, b), [(3, 4), (4, 2)]),
    "matmul_batched": (lambda a, b: T.matmul(a, b), [(2, 3, 4), (2, 4, 2)]),
    "conv1d": (lambda x, k: T.conv1d(x, k), [(5, 2), (3, 2, 3)]),
    "softmax": (lambda x: T.softmax_rows(x), [(3, 4)]),
    "layer_mean": (lambda x: T.layer_stats(x)[0], [(3, 5)]),
    "layer_std": (lambda x: T.layer_stats(x)[1], [(3, 5)]),
    "sigmoid": (T.sigmoid, [(3, 3)]),
    "tanh": (T.tanh, [(3, 3)]),
    "gelu": (T.gelu, [(3, 3)]),
    "add": (T.add, [(2, 3), (2, 3)]),
    "sub": (T.sub, [(2, 3), (2, 3)]),
    "mul": (T.mul, [(2, 3), (2, 3)]),
    "scale": (lambda x: T.scale(x, -1.7), [(2, 3)]),
    "shift": (lambda x: T.shift(x, 0.4), [(2, 3)]),
    "concat_rows": (T.concat_rows, [(2, 3), (1, 3)]),
    "slice_rows": (lambda x: T.slice_rows(x, 1, 3), [(4, 2)]),
    "transpose": (lambda x: T.transpose(x, (1, 0, 2)), [(2, 3, 2)]),
    "reshape": (lambda x: T.reshape(x, (3, 2)), [(2, 3)]),
    "mean_rows": (T.mean_rows, [(4, 3)]),
    "expand_rows": (lambda v: T.expand_rows(v, 3), [(4,)]),
    "expand_last": (lambda v: T.expand_last(v, 3), [(4,)]),
    "sum": (T.sum_all, [(2, 3)]),
    "mean": (T.mean_all, [(2, 3)]),
    "dropout": (lambda x: T.dropout(x, 0.3, 5), [(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name, rng):
    fn, shapes = PRIMITIVES[name]
    xs = [_rand(rng, *s) for s in shapes]
    assert T.grad_check(fn, xs, h=1e-5) < 1e-4


def test_div_gradient(rng):
    a = _rand(rng, 2, 3)
    b = Tensor(rng.uniform(0.5, 2.0, (2, 3)))
    assert T.grad_check(T.div, [a, b]) < 1e-4


def test_grad_check_matmul_chain(rng):
    a, b, c = _rand(rng, 3, 4), _rand(rng, 4, 4), _rand(rng, 4, 2)
    err = T.grad_check(lambda a, b, c: T.matmul(T.matmul(a, b), c), [a, b, c])
    assert err < 1e-6


def test_grad_check_constant_function(rng):
    x = _rand(rng, 3)
    assert T.grad_check(lambda x: Tensor(np.array(2.0)), x) == pytest.approx(0.0, abs=1e-8)


def test_grad_check_detects_wrong_gradient(monkeypatch, rng):
    monkeypatch.setattr(T, "tanh_deriv", lambda y: -(1.0 - y * y))
    assert T.grad_check(T.tanh, _rand(rng, 3, 3)) > 1e-2


@settings(max_examples=25, deadline=None)
@given(hnp.arrays(np.float64, (2, 4), elements=st.floats(-3, 3)))
def test_finite_inputs_give_finite_outputs(x):
    t = Tensor(x)
    for out in (T.sigmoid(t), T.tanh(t), T.gelu(t), T.softmax_rows(t), *T.layer_stats(t)):
        assert np.all(np.isfinite(out.data))
