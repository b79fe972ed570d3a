import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import reference as ref
from eegattn import tensor as T
from eegattn.exceptions import ShapeError
from eegattn.tensor import Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------------------
# conv_time


def test_conv_identity_kernel():
    out = T.conv_time(Tensor(np.array([[[1.0, 2.0, 3.0]]])), Tensor(np.array([[[1.0]]])), padding="same")
    assert out.data.tolist() == [[[1.0, 2.0, 3.0]]]


def test_conv_sliding_sum_valid():
    out = T.conv_time(Tensor(np.array([[[1.0, 2.0, 3.0, 4.0]]])), Tensor(np.array([[[1.0, 1.0]]])), padding="valid")
    assert out.data.tolist() == [[[3.0, 5.0, 7.0]]]


@pytest.mark.parametrize("padding", ["same", "valid"])
@pytest.mark.parametrize("K", [1, 2, 3, 4])
def test_conv_grouped_matches_loops(padding, K):
    rng = np.random.default_rng(K)
    for _ in range(10):
        x = rng.standard_normal((2, 4, 8))
        w = rng.standard_normal((6, 2, K))
        b = rng.standard_normal(6)
        got = T.conv_time(Tensor(x), Tensor(w), groups=2, padding=padding, bias=Tensor(b)).data
        assert np.max(np.abs(got - ref.conv_time(x, w, 2, padding, b))) <= 1e-12


def test_conv_shape_errors_name_dimension():
    x = Tensor(np.zeros((1, 3, 5)))
    with pytest.raises(ShapeError, match="group"):
        T.conv_time(x, Tensor(np.zeros((2, 1, 3))), groups=2)
    with pytest.raises(ShapeError):
        T.conv_time(x, Tensor(np.zeros((2, 2, 3))))
    with pytest.raises(ShapeError):
        T.conv_time(x, Tensor(np.zeros((1, 3, 6))), padding="valid")


def test_conv_gradcheck():
    rng = np.random.default_rng(0)
    x, w, b = leaf(rng.standard_normal((2, 4, 7))), leaf(rng.standard_normal((4, 2, 3))), leaf(rng.standard_normal(4))
    weights = Tensor(rng.standard_normal((2, 4, 7)))

    def f(_):
        return T.tsum(T.mul(T.conv_time(x, w, groups=2, padding="same", bias=b), weights))

    for theta in (x, w, b):
        assert T.grad_check(f, theta) <= 1e-8


# ---------------------------------------------------------------------------
# reductions


def test_reduce_time_examples():
    x = Tensor(np.array([[[1.0, 3.0], [2.0, 6.0]]]))
    assert T.reduce_time(x, "mean").data.tolist() == [[2.0, 4.0]]
    assert T.reduce_time(Tensor(np.full((1, 1, 4), 5.0)), "std").data.tolist() == [[0.0]]
    assert math.isclose(T.reduce_time(Tensor(np.zeros((1, 1, 9))), "entropy").data[0, 0], math.log(9))


def test_reduce_channels_examples():
    x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    assert T.reduce_channels(x, "mean").data.tolist() == [[2.0, 3.0]]
    assert T.reduce_channels(x, "max").data.tolist() == [[3.0, 4.0]]


@pytest.mark.parametrize("stat", T.REDUCE_TIME_STATS)
def test_reduce_time_matches_loops(stat):
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = rng.standard_normal((2, int(rng.integers(1, 9)), int(rng.integers(1, 9))))
        assert np.max(np.abs(T.reduce_time(Tensor(x), stat).data - ref.reduce_time(x, stat))) <= 1e-12


@pytest.mark.parametrize("stat", T.REDUCE_CHANNEL_STATS)
def test_reduce_channels_matches_loops(stat):
    rng = np.random.default_rng(2)
    for _ in range(20):
        x = rng.standard_normal((2, int(rng.integers(1, 9)), int(rng.integers(1, 9))))
        assert np.max(np.abs(T.reduce_channels(Tensor(x), stat).data - ref.reduce_channels(x, stat))) <= 1e-12


@pytest.mark.parametrize("stat", T.REDUCE_TIME_STATS)
def test_reduce_time_gradcheck(stat):
    x = leaf(np.random.default_rng(3).standard_normal((2, 3, 6)))
    assert T.grad_check(lambda t: T.tsum(T.square(T.reduce_time(t, stat))), x) <= 1e-6


@pytest.mark.parametrize("stat", T.REDUCE_CHANNEL_STATS)
def test_reduce_channels_gradcheck(stat):
    x = leaf(np.random.default_rng(4).standard_normal((2, 3, 6)))
    assert T.grad_check(lambda t: T.tsum(T.square(T.reduce_channels(t, stat))), x) <= 1e-6


def test_max_ties_route_to_first_index():
    x = leaf(np.array([[[1.0, 1.0], [1.0, 0.0]]]))
    T.tsum(T.reduce_channels(x, "max")).backward()
    assert x.grad.tolist() == [[[1.0, 1.0], [0.0, 0.0]]]


def test_std_and_l2_gradients_finite_at_zero():
    x = leaf(np.zeros((1, 2, 4)))
    T.tsum(T.add(T.reduce_time(x, "std"), T.reduce_time(x, "l2"))).backward()
    assert np.all(np.isfinite(x.grad))


def test_unknown_stat_rejected():
    with pytest.raises(ValueError):
        T.reduce_time(Tensor(np.zeros((1, 1, 2))), "median")
    with pytest.raises(ValueError):
        T.reduce_channels(Tensor(np.zeros((1, 1, 2))), "std")


# ---------------------------------------------------------------------------
# covariance


def test_covariance_examples():
    assert np.all(T.covariance(Tensor(np.full((1, 3, 5), 2.0))).data == 0.0)
    assert T.covariance(Tensor(np.array([[[0.0, 2.0]]]))).data.tolist() == [[[2.0]]]
    with pytest.raises(ValueError):
        T.covariance(Tensor(np.zeros((1, 2, 1))))


def test_covariance_matches_loops():
    rng = np.random.default_rng(5)
    for _ in range(20):
        x = rng.standard_normal((2, 3, 5))
        c = T.covariance(Tensor(x)).data
        assert np.max(np.abs(c - ref.covariance(x))) <= 1e-12
        assert np.allclose(c, c.transpose(0, 2, 1))
        assert np.all(np.linalg.eigvalsh(c) >= -1e-12)


def test_covariance_gradcheck():
    x = leaf(np.random.default_rng(6).standard_normal((2, 3, 5)))
    w = Tensor(np.random.default_rng(7).standard_normal((2, 3, 3)))
    assert T.grad_check(lambda t: T.tsum(T.mul(T.covariance(t), w)), x) <= 1e-8


# ---------------------------------------------------------------------------
# standard layers


@pytest.mark.parametrize("training", [True, False])
@pytest.mark.parametrize("axis", [1, 2])
def test_batchnorm_matches_loops(training, axis):
    rng = np.random.default_rng(8)
    x = rng.standard_normal((3, 4, 5)) * 2 + 1
    n = x.shape[axis]
    g, b = rng.standard_normal(n), rng.standard_normal(n)
    rm, rv = rng.standard_normal(n), rng.uniform(0.5, 2, n)
    ey, erm, erv = ref.batchnorm(x, g, b, rm, rv, training, axis=axis)
    rm2, rv2 = rm.copy(), rv.copy()
    y = T.batchnorm(Tensor(x), Tensor(g), Tensor(b), rm2, rv2, training, axis=axis).data
    assert np.max(np.abs(y - ey)) <= 1e-12
    assert np.max(np.abs(rm2 - erm)) <= 1e-12
    assert np.max(np.abs(rv2 - erv)) <= 1e-12


def test_batchnorm_gradcheck():
    rng = np.random.default_rng(9)
    x, g, b = leaf(rng.standard_normal((3, 4, 5))), leaf(rng.standard_normal(4)), leaf(rng.standard_normal(4))
    w = Tensor(rng.standard_normal((3, 4, 5)))

    def f(_):
        return T.tsum(T.mul(T.batchnorm(x, g, b, np.zeros(4), np.ones(4), True), w))

    for theta in (x, g, b):
        assert T.grad_check(f, theta) <= 1e-6


def test_pool_lengths():
    assert T.pooled_length(1000, 75, 15) == 62
    assert T.pooled_length(62, 8, 8) == 7
    out = T.avg_pool_time(Tensor(np.arange(1, 1001, dtype=np.float64).reshape(1, 1, -1)), 75, 15)
    assert out.shape == (1, 1, 62)
    assert out.data[0, 0, 0] == np.mean(np.arange(1, 76))
    with pytest.raises(ValueError):
        T.avg_pool_time(Tensor(np.zeros((1, 1, 5))), 6, 1)


def test_pool_gradcheck():
    x = leaf(np.random.default_rng(10).standard_normal((2, 2, 20)))
    w = Tensor(np.random.default_rng(11).standard_normal((2, 2, 4)))
    assert T.grad_check(lambda t: T.tsum(T.mul(T.avg_pool_time(t, 5, 4), w)), x) <= 1e-8


def test_elementwise_values():
    assert T.sigmoid(Tensor(np.array(0.0))).data == 0.5
    z = np.linspace(-40, 40, 81)
    assert np.allclose(T.sigmoid(Tensor(z)).data, [ref.sig(v) for v in z], atol=1e-15)
    assert np.allclose(T.elu(Tensor(z)).data, np.where(z > 0, z, np.expm1(z)))
    assert np.all(np.isfinite(T.sigmoid(Tensor(np.array([-1e4, 1e4]))).data))


@pytest.mark.parametrize("kind", ["sigmoid", "tanh", "elu", "relu"])
def test_elementwise_gradcheck(kind):
    x = leaf(np.random.default_rng(12).standard_normal(20) * 3)
    assert T.grad_check(lambda t: T.tsum(T.square(T.elementwise(t, kind))), x) <= 1e-7


def test_dropout_modes():
    x = Tensor(np.random.default_rng(13).standard_normal((4, 100)))
    assert T.dropout(x, 0.5, False, None) is x
    y = T.dropout(x, 0.5, True, np.random.default_rng(0)).data
    kept = y != 0
    assert 0.3 < kept.mean() < 0.7
    assert np.allclose(y[kept], 2 * x.data[kept])


def test_linear_softmax_cross_entropy():
    rng = np.random.default_rng(14)
    x, W, b = leaf(rng.standard_normal((5, 3))), leaf(rng.standard_normal((4, 3))), leaf(rng.standard_normal(4))
    labels = np.array([0, 3, 1, 2, 3])
    logits = x.data @ W.data.T + b.data
    p = np.exp(logits - logits.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    assert np.allclose(T.softmax(Tensor(logits), axis=1).data, p)
    expect = -np.mean(np.log(p[np.arange(5), labels]))
    assert math.isclose(float(T.cross_entropy(T.linear(x, W, b), labels).data), expect, rel_tol=1e-12)
    for theta in (x, W, b):
        assert T.grad_check(lambda _: T.cross_entropy(T.linear(x, W, b), labels), theta) <= 1e-8


# ---------------------------------------------------------------------------
# autodiff behaviour


def test_grad_check_quadratic():
    theta = leaf([1.0, 2.0])
    T.tsum(T.square(theta)).backward()
    assert theta.grad.tolist() == [2.0, 4.0]
    theta.zero_grad()
    assert T.grad_check(lambda t: T.tsum(T.square(t)), theta) <= 1e-9


def test_grad_check_rejects_nonfinite_and_f32():
    with pytest.raises(FloatingPointError), np.errstate(invalid="ignore"):
        T.grad_check(lambda t: T.tsum(T.log(t)), leaf([-1.0]))
    with pytest.raises(TypeError):
        T.grad_check(lambda t: T.tsum(t), Tensor(np.ones(2, dtype=np.float32), requires_grad=True))


def test_gradient_accumulates_additively():
    rng = np.random.default_rng(15)
    x = leaf(rng.standard_normal((2, 3, 4)))
    w = leaf(rng.standard_normal((3, 3, 3)))
    loss = lambda: T.tsum(T.tanh(T.conv_time(x, w)))  # noqa: E731
    loss().backward()
    once = w.grad.copy()
    loss().backward()
    assert np.array_equal(w.grad, 2 * once)


def test_shared_subexpression_visited_once():
    x = leaf([3.0])
    y = T.mul(x, x)
    T.tsum(T.add(y, y)).backward()
    assert x.grad.tolist() == [12.0]


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 5), st.integers(2, 8)),
              elements=st.floats(-50, 50)))
def test_forward_ops_stay_finite(x):
    t = Tensor(x)
    for stat in T.REDUCE_TIME_STATS:
        assert np.all(np.isfinite(T.reduce_time(t, stat).data))
    for stat in T.REDUCE_CHANNEL_STATS:
        assert np.all(np.isfinite(T.reduce_channels(t, stat).data))
    assert np.all(np.isfinite(T.covariance(t).data))
    for kind in ("sigmoid", "tanh", "elu", "relu"):
        assert np.all(np.isfinite(T.elementwise(t, kind).data))
