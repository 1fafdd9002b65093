import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mspn.errors import ContractError
from mspn.tensor import FeatureMapStack, concat, row_reduce, row_reduce_backward, split


def brute_row_reduce(maps, mode):
    out = []
    for m in range(maps.shape[0]):
        for r in range(maps.shape[1]):
            row = [float(v) for v in maps[m, r]]
            out.append(max(row) if mode == "max" else sum(row) / len(row))
    return np.array(out)


EXAMPLE = np.array([[[1.0, 5.0, 2.0], [0.0, -1.0, 3.0]]])


def test_feature_map_stack_validates_shape():
    stack = FeatureMapStack.from_flat(2, 3, 4, np.arange(24))
    assert (stack.n_map, stack.h, stack.w) == (2, 3, 4)
    with pytest.raises(ContractError):
        FeatureMapStack.from_flat(2, 3, 4, np.arange(23))
    with pytest.raises(ContractError):
        FeatureMapStack(np.zeros((2, 0, 3)))


def test_row_reduce_descriptor_length_for_conv4_output():
    out, _ = row_reduce(np.random.default_rng(0).normal(size=(512, 1, 37)), "max")
    assert out.shape == (512,)


@pytest.mark.parametrize("mode", ["max", "average"])
def test_constant_map_reduces_to_constant(mode):
    out, _ = row_reduce(np.full((1, 2, 3), 4.25), mode)
    np.testing.assert_array_equal(out, [4.25, 4.25])


@pytest.mark.parametrize("mode", ["max", "average"])
def test_row_reduce_matches_brute_force_scan(mode):
    out, _ = row_reduce(FeatureMapStack(EXAMPLE), mode)
    np.testing.assert_allclose(out, brute_row_reduce(EXAMPLE, mode))


def test_row_reduce_hand_values():
    np.testing.assert_array_equal(row_reduce(EXAMPLE, "max")[0], [5, 3])
    np.testing.assert_allclose(row_reduce(EXAMPLE, "average")[0], [8 / 3, 2 / 3])


def test_max_backward_matches_finite_differences():
    x = EXAMPLE.copy()
    _, cache = row_reduce(x, "max")
    grad = row_reduce_backward(np.array([1.0, 1.0]), cache)
    eps, numeric = 1e-6, np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        numeric[idx] = (row_reduce(xp, "max")[0].sum() - row_reduce(xm, "max")[0].sum()) / (2 * eps)
    np.testing.assert_allclose(grad, numeric, atol=1e-8)
    np.testing.assert_array_equal(grad[0], [[0, 1, 0], [0, 0, 1]])


def test_average_backward_splits_uniformly():
    _, cache = row_reduce(np.zeros((1, 2, 3)), "average")
    np.testing.assert_array_equal(row_reduce_backward(np.array([3.0, 0.0]), cache)[0],
                                  [[1, 1, 1], [0, 0, 0]])


@pytest.mark.parametrize("mode", ["max", "average"])
def test_zero_gradient_gives_zero_map(mode):
    _, cache = row_reduce(np.random.default_rng(1).normal(size=(3, 2, 5)), mode)
    assert not row_reduce_backward(np.zeros(6), cache).any()


def test_backward_rejects_wrong_length():
    _, cache = row_reduce(np.zeros((2, 3, 4)), "max")
    with pytest.raises(ContractError):
        row_reduce_backward(np.zeros(5), cache)


def test_max_ties_go_to_lowest_column():
    _, cache = row_reduce(np.array([[[2.0, 7.0, 7.0, 1.0]]]), "max")
    assert cache.argmax[0, 0] == 1


def test_batched_input_matches_per_sample():
    x = np.random.default_rng(2).normal(size=(4, 3, 2, 6))
    batched, _ = row_reduce(x, "max")
    for i in range(4):
        np.testing.assert_array_equal(batched[i], row_reduce(x[i], "max")[0])


def test_concat_lengths_and_order():
    parts = [np.zeros(1792), np.ones(1152), np.full(512, 2.0)]
    assert concat(parts).shape == (3456,)
    np.testing.assert_array_equal(concat([np.array([1, 2]), np.array([3])]), [1, 2, 3])
    v = np.array([4.0, 5.0])
    out = concat([v])
    np.testing.assert_array_equal(out, v)
    assert out is not v


def test_concat_empty_is_contract_violation():
    with pytest.raises(ContractError):
        concat([])


stacks = st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 9)).flatmap(
    lambda shape: arrays(np.float64, shape,
                         elements=st.floats(-1e3, 1e3, allow_nan=False, allow_subnormal=False)))


@settings(max_examples=60, deadline=None)
@given(stacks, st.randoms(use_true_random=False))
def test_column_permutation_invariance(maps, rnd):
    perm = list(range(maps.shape[2]))
    rnd.shuffle(perm)
    permuted = maps[:, :, perm]
    np.testing.assert_array_equal(row_reduce(maps, "max")[0], row_reduce(permuted, "max")[0])
    np.testing.assert_allclose(row_reduce(maps, "average")[0],
                               row_reduce(permuted, "average")[0], rtol=1e-9, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(stacks)
def test_max_is_bounded_by_map_maximum(maps):
    out = row_reduce(maps, "max")[0].reshape(maps.shape[:2])
    for m in range(maps.shape[0]):
        assert out[m].max() == maps[m].max()
        assert (out[m] <= maps[m].max()).all()


@settings(max_examples=30, deadline=None)
@given(stacks, st.sampled_from(["max", "average"]))
def test_backward_is_adjoint_of_directional_derivative(maps, mode):
    rng = np.random.default_rng(0)
    maps = maps + rng.normal(scale=1e-3, size=maps.shape)  # break exact ties
    if mode == "max":
        rows = np.sort(maps, axis=-1)
        if maps.shape[-1] > 1 and np.min(rows[..., -1] - rows[..., -2]) < 1e-4:
            return
    g = rng.normal(size=maps.shape[0] * maps.shape[1])
    d = rng.normal(size=maps.shape)
    _, cache = row_reduce(maps, mode)
    analytic = float(np.sum(row_reduce_backward(g, cache) * d))
    eps = 1e-6
    numeric = float(g @ (row_reduce(maps + eps * d, mode)[0]
                         - row_reduce(maps - eps * d, mode)[0])) / (2 * eps)
    assert abs(analytic - numeric) <= 1e-6 * max(1.0, abs(numeric))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=1, max_size=5))
def test_concat_then_split_round_trips(lengths):
    rng = np.random.default_rng(sum(lengths))
    parts = [rng.normal(size=n) for n in lengths]
    for original, recovered in zip(parts, split(concat(parts), lengths)):
        np.testing.assert_array_equal(original, recovered)
