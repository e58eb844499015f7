import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from deyo_lab.errors import DimensionError, NumericInputError
from deyo_lab.numerics import add, entropy, hadamard, log_softmax, make_rng, matmul, sigmoid, softmax, spawn

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_softmax_uniform():
    np.testing.assert_allclose(softmax(np.zeros(3)), np.full(3, 1 / 3), atol=1e-15)


def test_softmax_large_logit_does_not_overflow():
    p = softmax(np.array([1000.0, 0.0]))
    assert np.all(np.isfinite(p))
    assert p[0] == 1.0
    assert p[1] < 1e-300


def test_softmax_log_two():
    np.testing.assert_allclose(softmax(np.array([math.log(2), 0.0])), [2 / 3, 1 / 3], atol=1e-15)


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_softmax_rejects_non_finite(bad):
    with pytest.raises(NumericInputError):
        softmax(np.array([0.0, bad]))


@given(arrays(np.float64, st.integers(1, 12), elements=finite))
def test_softmax_sums_to_one(z):
    assert abs(softmax(z).sum() - 1.0) < 1e-12


@given(arrays(np.float64, 6, elements=finite), st.permutations(range(6)))
def test_softmax_permutation_equivariant(z, perm):
    perm = np.array(perm)
    np.testing.assert_allclose(softmax(z[perm]), softmax(z)[perm], rtol=1e-13, atol=1e-300)


@given(arrays(np.float64, st.integers(1, 8), elements=finite))
def test_log_softmax_matches_log_of_softmax(z):
    np.testing.assert_allclose(np.exp(log_softmax(z)), softmax(z), rtol=1e-12, atol=1e-300)


def test_sigmoid_examples():
    assert sigmoid(0.0) == 0.5
    assert abs(sigmoid(50.0) - 1.0) < 1e-12
    assert abs(sigmoid(math.log(3)) - 0.75) < 1e-15


@given(finite)
def test_sigmoid_symmetry(a):
    assert abs(sigmoid(-a) - (1 - sigmoid(a))) < 1e-12


def test_sigmoid_extreme_inputs_stay_finite():
    out = sigmoid(np.array([-1000.0, 1000.0]))
    np.testing.assert_array_equal(out, [0.0, 1.0])


def test_entropy_edge_cases():
    assert entropy(np.array([1.0, 0.0])) == 0.0
    assert abs(entropy(np.full(7, 1 / 7)) - math.log(7)) < 1e-12
    assert abs(entropy(np.array([0.9, 0.1])) - 0.3250829733914482) < 1e-15


def test_matmul_identity_and_scalars():
    a = make_rng(3).normal(size=(3, 4))
    np.testing.assert_array_equal(matmul(np.eye(3), a), a)
    assert matmul([[2.0]], [[3.5]])[0, 0] == 7.0
    assert add([[2.0]], [[3.5]])[0, 0] == 5.5
    assert hadamard([[2.0]], [[3.5]])[0, 0] == 7.0


def test_matmul_against_triple_loop():
    rng = make_rng(11)
    a, b = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    naive = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            for k in range(3):
                naive[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(matmul(a, b), naive, atol=1e-12, rtol=0)


def test_shape_mismatch_errors():
    with pytest.raises(DimensionError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(DimensionError):
        add(np.ones(3), np.ones(4))
    with pytest.raises(DimensionError):
        hadamard(np.ones((2, 2)), np.ones((2, 1)))


def test_rng_determinism():
    a = make_rng(42).random(1000)
    np.testing.assert_array_equal(a, make_rng(42).random(1000))
    assert np.any(a != make_rng(43).random(1000))


def test_spawned_children_are_independent_and_reproducible():
    c1, c2 = spawn(make_rng(5), 2)
    d1, d2 = spawn(make_rng(5), 2)
    np.testing.assert_array_equal(c1.random(10), d1.random(10))
    assert np.any(c2.random(10) != c1.random(10))


@settings(max_examples=50)
@given(arrays(np.float64, (4, 3), elements=finite))
def test_entropy_bounds(z):
    h = entropy(softmax(z))
    assert np.all(h >= -1e-15)
    assert np.all(h <= math.log(3) + 1e-12)
