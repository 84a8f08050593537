import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slicenet import tensor as T
from oracles import max_rel_error, naive_conv2d, naive_maxpool, numeric_grad


def test_as_tensor_rejects_empty_and_scalar():
    with pytest.raises(T.ShapeError):
        T.as_tensor(np.zeros((0, 3)))
    with pytest.raises(T.ShapeError):
        T.as_tensor(1.0)
    assert T.as_tensor([1, 2]).dtype == np.float64


# -- conv forward ------------------------------------------------------------


def test_conv_sum_of_ones():
    out, _ = T.conv2d_forward(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1))
    assert out.shape == (1, 1, 1, 1)
    assert out[0, 0, 0, 0] == 9.0


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 1, 7, 5))
    out, _ = T.conv2d_forward(x, np.ones((1, 1, 1, 1)), np.zeros(1))
    np.testing.assert_array_equal(out, x)


def test_conv_matches_naive_loop():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 8, 8))
    k = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out, _ = T.conv2d_forward(x, k, b, stride=2, pad=1)
    ref = naive_conv2d(x, k, b, 2, 1)
    assert out.shape == ref.shape == (2, 4, 4, 4)
    assert np.abs(out - ref).max() < 1e-12


@pytest.mark.parametrize("k", [1, 3, 5, 7])
def test_conv_same_padding_preserves_extent(k):
    x = np.zeros((1, 2, 9, 11))
    out, _ = T.conv2d_forward(x, np.zeros((3, 2, k, k)), np.zeros(3), stride=1, pad=(k - 1) // 2)
    assert out.shape[2:] == (9, 11)


def test_conv_rejects_channel_mismatch():
    with pytest.raises(T.ShapeError, match="channels"):
        T.conv2d_forward(np.zeros((1, 2, 5, 5)), np.zeros((1, 3, 3, 3)), np.zeros(1))


def test_conv_rejects_oversized_kernel():
    with pytest.raises(T.ShapeError):
        T.conv2d_forward(np.zeros((1, 1, 3, 3)), np.zeros((1, 1, 5, 5)), np.zeros(1))


# -- conv backward -----------------------------------------------------------


def _conv_grad_check(seed, shape=(1, 2, 5, 5), nf=3, k=3, stride=1, pad=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=shape)
    w = rng.normal(size=(nf, shape[1], k, k))
    b = rng.normal(size=nf)
    out, cache = T.conv2d_forward(x, w, b, stride, pad)
    r = rng.normal(size=out.shape)
    gx, gw, gb = T.conv2d_backward(r, cache)

    def loss():
        return float((T.conv2d_forward(x, w, b, stride, pad)[0] * r).sum())

    return max(
        max_rel_error(gx, numeric_grad(loss, x)),
        max_rel_error(gw, numeric_grad(loss, w)),
        max_rel_error(gb, numeric_grad(loss, b)),
    )


def test_conv_backward_finite_difference():
    assert _conv_grad_check(0) < 1e-6


@pytest.mark.parametrize("stride,pad", [(2, 1), (1, 2), (3, 0)])
def test_conv_backward_strided_padded(stride, pad):
    assert _conv_grad_check(5, shape=(2, 2, 7, 6), stride=stride, pad=pad) < 1e-6


def test_conv_backward_zero_grad():
    rng = np.random.default_rng(2)
    out, cache = T.conv2d_forward(rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), np.zeros(3))
    for g in T.conv2d_backward(np.zeros_like(out), cache):
        assert not g.any()


def test_conv_backward_1x1_kernel_is_correlation():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 1, 4, 6))
    out, cache = T.conv2d_forward(x, rng.normal(size=(1, 1, 1, 1)), np.zeros(1))
    g = rng.normal(size=out.shape)
    _, gw, _ = T.conv2d_backward(g, cache)
    assert gw[0, 0, 0, 0] == pytest.approx(float((x * g).sum()), rel=1e-14)


def test_conv_backward_rejects_bad_grad_shape():
    out, cache = T.conv2d_forward(np.zeros((1, 1, 4, 4)), np.zeros((2, 1, 3, 3)), np.zeros(2))
    with pytest.raises(T.ShapeError):
        T.conv2d_backward(np.zeros((1, 2, 3, 3)), cache)


# -- max pooling -------------------------------------------------------------


def test_pool_small_example():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    out, cache = T.maxpool2d_forward(x, 2)
    assert out.tolist() == [[[[4.0]]]]
    np.testing.assert_array_equal(T.maxpool2d_backward(np.ones((1, 1, 1, 1)), cache), [[[[0, 0], [0, 1]]]])


def test_pool_constant_first_index_tie_break():
    x = np.full((1, 2, 4, 4), 3.5)
    out, cache = T.maxpool2d_forward(x, 2)
    assert np.all(out == 3.5)
    # top-left of each window
    np.testing.assert_array_equal(cache.argmax[0, 0], [[0, 2], [8, 10]])


def test_pool_matches_naive_loop():
    x = np.random.default_rng(4).normal(size=(1, 1, 6, 6))
    out, _ = T.maxpool2d_forward(x, 2)
    np.testing.assert_array_equal(out, naive_maxpool(x, 2, 2))


def test_pool_overlapping_matches_naive_loop_and_accumulates():
    x = np.random.default_rng(5).normal(size=(2, 3, 7, 7))
    out, cache = T.maxpool2d_forward(x, 3, stride=2)
    np.testing.assert_array_equal(out, naive_maxpool(x, 3, 2))
    g = T.maxpool2d_backward(np.ones_like(out), cache)
    assert g.sum() == out.size


def test_pool_backward_finite_difference():
    rng = np.random.default_rng(6)
    # well separated values so eps-perturbations never flip a window's winner
    x = rng.permutation(72).astype(float).reshape(2, 1, 6, 6) * 0.1
    out, cache = T.maxpool2d_forward(x, 2)
    r = rng.normal(size=out.shape)
    g = T.maxpool2d_backward(r, cache)

    def loss():
        return float((T.maxpool2d_forward(x, 2)[0] * r).sum())

    assert max_rel_error(g, numeric_grad(loss, x)) < 1e-6


def test_pool_zero_grad():
    out, cache = T.maxpool2d_forward(np.random.default_rng(7).normal(size=(1, 1, 4, 4)), 2)
    assert not T.maxpool2d_backward(np.zeros_like(out), cache).any()


def test_pool_rejects_large_window_and_stale_cache():
    with pytest.raises(T.ShapeError):
        T.maxpool2d_forward(np.zeros((1, 1, 3, 3)), 4)
    _, cache = T.maxpool2d_forward(np.zeros((1, 1, 4, 4)), 2)
    with pytest.raises(T.ShapeError):
        T.maxpool2d_backward(np.zeros((1, 1, 3, 3)), cache)


@settings(max_examples=30, deadline=None)
@given(st.floats(-1e6, 1e6, allow_nan=False), st.integers(1, 3), st.integers(3, 9))
def test_pool_constant_property(value, window, size):
    out, _ = T.maxpool2d_forward(np.full((1, 1, size, size), value), window)
    assert np.all(out == value)


# -- dense / elementwise -----------------------------------------------------


def test_relu_values_and_zero_convention():
    np.testing.assert_array_equal(T.relu_forward([-1.0, 0.0, 2.0]), [0.0, 0.0, 2.0])
    np.testing.assert_array_equal(T.relu_backward(np.ones(3), np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 1.0])


def test_matmul_identity():
    a = np.random.default_rng(8).normal(size=(3, 4))
    np.testing.assert_array_equal(T.matmul_forward(np.eye(3), a), a)


def test_matmul_backward_finite_difference():
    rng = np.random.default_rng(9)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    r = rng.normal(size=(3, 2))
    ga, gb = T.matmul_backward(r, a, b)

    def loss():
        return float((T.matmul_forward(a, b) * r).sum())

    assert max_rel_error(ga, numeric_grad(loss, a)) < 1e-8
    assert max_rel_error(gb, numeric_grad(loss, b)) < 1e-8


def test_matmul_rejects_nonconformable():
    with pytest.raises(T.ShapeError):
        T.matmul_forward(np.zeros((2, 3)), np.zeros((2, 3)))


def test_add_and_mul_backward():
    rng = np.random.default_rng(10)
    a, b, v = rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), rng.normal(size=4)
    r = rng.normal(size=(3, 4))
    _, gv = T.add_backward(r, v.shape)

    def loss_add():
        return float((T.add_forward(a, v) * r).sum())

    assert max_rel_error(gv, numeric_grad(loss_add, v)) < 1e-8
    ga, gb = T.mul_backward(r, a, b)

    def loss_mul():
        return float((T.mul_forward(a, b) * r).sum())

    assert max_rel_error(ga, numeric_grad(loss_mul, a)) < 1e-8
    assert max_rel_error(gb, numeric_grad(loss_mul, b)) < 1e-8
    with pytest.raises(T.ShapeError):
        T.add_forward(a, np.zeros(3))


def test_relu_backward_finite_difference():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(4, 5))
    x[np.abs(x) < 1e-3] = 0.5  # stay away from the kink
    r = rng.normal(size=x.shape)

    def loss():
        return float((T.relu_forward(x) * r).sum())

    assert max_rel_error(T.relu_backward(r, x), numeric_grad(loss, x)) < 1e-8


def test_operations_are_deterministic():
    rng = np.random.default_rng(12)
    x, k = rng.normal(size=(3, 2, 9, 9)), rng.normal(size=(4, 2, 3, 3))
    a, ca = T.conv2d_forward(x, k, np.zeros(4), 2, 1)
    b, cb = T.conv2d_forward(x.copy(), k.copy(), np.zeros(4), 2, 1)
    assert a.tobytes() == b.tobytes()
    g = rng.normal(size=a.shape)
    for u, v in zip(T.conv2d_backward(g, ca), T.conv2d_backward(g, cb)):
        assert u.tobytes() == v.tobytes()


def test_softmax_rows_sum_to_one():
    p = T.softmax(np.random.default_rng(13).normal(scale=20, size=(50, 5)))
    assert np.all(np.abs(p.sum(axis=1) - 1) < 1e-12)
    assert np.all(p > 0)
