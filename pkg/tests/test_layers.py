import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mspn.errors import ContractError, MinWidthError
from mspn.gradcheck import LAYER_KINDS, TOLERANCE, check_layer, numeric_grad, rel_error
from mspn.layers import (
    Conv, conv_backward, conv_forward, conv_output_size, fc_forward, glorot_uniform,
    maxpool_backward, maxpool_forward, relu_backward, relu_forward, softmax,
    softmax_xent_backward, softmax_xent_forward, standardize_forward,
)


def loop_conv(x, w, b, pad):
    """Direct nested-loop cross-correlation."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad[0], pad[0]), (pad[1], pad[1])))
    oh, ow = h + 2 * pad[0] - kh + 1, wd + 2 * pad[1] - kw + 1
    y = np.zeros((n, o, oh, ow))
    for s in range(n):
        for m in range(o):
            for i in range(oh):
                for j in range(ow):
                    y[s, m, i, j] = np.sum(xp[s, :, i:i + kh, j:j + kw] * w[m]) + b[m]
    return y


def test_conv_output_size_for_first_stage():
    assert conv_output_size(32, 3, 0) == 30
    assert conv_output_size(100, 3, 0) == 98
    assert conv_output_size(15, 3, 1) == 15


@pytest.mark.parametrize("pad", [(0, 0), (1, 1), (0, 2)])
def test_conv_matches_loop_oracle(rng, pad):
    x = rng.normal(size=(2, 3, 6, 7))
    w = rng.normal(size=(4, 3, 3, 2))
    b = rng.normal(size=4)
    np.testing.assert_allclose(conv_forward(x, w, b, pad)[0], loop_conv(x, w, b, pad),
                               rtol=1e-12, atol=1e-12)


def test_conv_first_layer_shape():
    x = np.zeros((1, 1, 32, 100), dtype=np.float32)
    layer = Conv.create(np.random.default_rng(0), 1, 96, (3, 3), (0, 0))
    assert layer.forward(x)[0].shape == (1, 96, 30, 98)


def test_identity_kernel_and_zero_kernel(rng):
    x = rng.normal(size=(1, 1, 4, 5))
    y, _ = conv_forward(x, np.ones((1, 1, 1, 1)), np.zeros(1))
    np.testing.assert_array_equal(y, x)
    y, _ = conv_forward(x, np.zeros((2, 1, 3, 3)), np.array([0.5, -2.0]))
    assert (y[0, 0] == 0.5).all() and (y[0, 1] == -2.0).all()


def test_conv_too_narrow_raises_min_width():
    with pytest.raises(MinWidthError, match="minimum"):
        conv_forward(np.zeros((1, 1, 5, 2)), np.zeros((1, 1, 3, 3)), np.zeros(1))


@settings(max_examples=25, deadline=None)
@given(st.integers(3, 9), st.integers(0, 10_000))
def test_conv_is_linear_in_input(width, seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(2, 2, 3, 3))
    zero = np.zeros(2)
    x1, x2 = rng.normal(size=(2, 1, 2, 5, width))
    a, c = rng.normal(size=2)
    lhs = conv_forward(a * x1 + c * x2, w, zero)[0]
    rhs = a * conv_forward(x1, w, zero)[0] + c * conv_forward(x2, w, zero)[0]
    np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-10)


def test_conv_backward_matches_finite_differences(rng):
    x = rng.normal(size=(2, 2, 5, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    g = rng.normal(size=(2, 3, 5, 6))
    y, cache = conv_forward(x, w, b, (1, 1))
    gx, gw, gb = conv_backward(g, cache, w)
    f = lambda: float(np.sum(conv_forward(x, w, b, (1, 1))[0] * g))
    assert rel_error(gx, numeric_grad(f, x)) < 1e-7
    assert rel_error(gw, numeric_grad(f, w)) < 1e-7
    assert rel_error(gb, numeric_grad(f, b)) < 1e-7


def test_relu_values_and_gradient():
    x = np.array([-1.0, 0.0, 2.0])
    y, mask = relu_forward(x)
    np.testing.assert_array_equal(y, [0, 0, 2])
    np.testing.assert_array_equal(relu_backward(np.ones(3), mask), [0, 0, 1])


def test_maxpool_single_window_routes_to_winner():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    y, cache = maxpool_forward(x)
    assert y.shape == (1, 1, 1, 1) and y[0, 0, 0, 0] == 4.0
    np.testing.assert_array_equal(maxpool_backward(np.ones((1, 1, 1, 1)), cache)[0, 0],
                                  [[0, 0], [0, 1]])


def test_maxpool_drops_odd_edge_and_matches_loops(rng):
    x = rng.normal(size=(2, 3, 7, 9))
    y, _ = maxpool_forward(x)
    assert y.shape == (2, 3, 3, 4)
    for i in range(3):
        for j in range(4):
            np.testing.assert_array_equal(y[:, :, i, j],
                                          x[:, :, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max(axis=(2, 3)))


def test_maxpool_ties_go_to_first_position():
    _, cache = maxpool_forward(np.full((1, 1, 2, 2), 3.0))
    np.testing.assert_array_equal(maxpool_backward(np.ones((1, 1, 1, 1)), cache)[0, 0],
                                  [[1, 0], [0, 0]])


def test_fc_dimension_mismatch():
    with pytest.raises(ContractError):
        fc_forward(np.zeros((1, 5)), np.zeros((3, 4)), np.zeros(3))


def test_uniform_logits_give_log_class_count():
    probs, loss = softmax_xent_forward(np.zeros(10), 3)
    np.testing.assert_allclose(probs, 0.1)
    assert loss == pytest.approx(math.log(10))


def test_large_logits_are_stable():
    logits = np.array([1000.0, 0.0, 0.0])
    probs, loss = softmax_xent_forward(logits, 0)
    assert np.isfinite(probs).all() and np.isfinite(loss)
    assert loss == pytest.approx(2 * math.exp(-1000), abs=1e-300)
    _, loss = softmax_xent_forward(logits, 1)
    assert loss == pytest.approx(1000.0)


def test_label_out_of_range():
    with pytest.raises(ContractError):
        softmax_xent_forward(np.zeros(4), 4)
    with pytest.raises(ContractError):
        softmax_xent_forward(np.zeros((2, 4)), [0, -1])


def test_softmax_gradient_is_probs_minus_onehot():
    logits = np.array([[0.5, -1.0, 2.0]])
    probs, _ = softmax_xent_forward(logits, [2])
    np.testing.assert_allclose(softmax_xent_backward(probs, [2]), probs - [[0, 0, 1]])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4, allow_nan=False), min_size=2, max_size=12))
def test_softmax_is_a_distribution(logits):
    p = softmax(np.array(logits))
    assert np.isfinite(p).all()
    assert (p >= 0).all()
    assert p.sum() == pytest.approx(1.0, abs=1e-12)


def test_standardize_zero_mean_unit_variance(rng):
    y, _ = standardize_forward(rng.normal(3.0, 5.0, size=(4, 1, 8, 9)))
    np.testing.assert_allclose(y.mean(axis=(1, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(y.std(axis=(1, 2, 3)), 1, atol=1e-6)


def test_glorot_bounds():
    w = glorot_uniform(np.random.default_rng(0), (200, 300), 300, 200, np.float64)
    assert np.abs(w).max() <= math.sqrt(6 / 500)
    assert w.dtype == np.float64


@pytest.mark.parametrize("kind", LAYER_KINDS)
def test_gradcheck_each_layer_kind(kind):
    rng = np.random.default_rng(7)
    assert max(check_layer(kind, rng) for _ in range(5)) < TOLERANCE
