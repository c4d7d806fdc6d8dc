#!/usr/bin/env python3
"""
Tests for the dense linear algebra layer
"""

import numpy as np
import pytest

from dense_core import (as_matrix, as_vector, check_finite, ewise, matvec, norms, outer,
                        outer_mean, vecmat)
from sim_errors import ConfigError, NumericalError


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def test_matvec_examples():
    assert np.array_equal(matvec(np.eye(2), np.array([3.0, 4.0])), [3.0, 4.0])
    assert matvec(np.array([[1.0, 1.0]]), np.array([0.6, 0.8]))[0] == pytest.approx(1.4)
    assert np.array_equal(matvec(np.zeros((3, 2)), np.array([5.0, -1.0])), np.zeros(3))


def test_matvec_batched_rows_match_single(rng):
    W = rng.normal(size=(4, 3))
    X = rng.normal(size=(5, 3))
    batched = matvec(W, X)
    for b in range(5):
        assert np.array_equal(batched[b], matvec(W, X[b]))


def test_vecmat_examples():
    W = np.array([[2.0, 3.0], [4.0, 5.0]])
    assert np.array_equal(vecmat(np.array([1.0, 0.0]), W), [2.0, 3.0])
    assert np.array_equal(vecmat(np.array([1.0]), np.array([[2.0, 3.0]])), [2.0, 3.0])
    assert np.array_equal(vecmat(np.array([1.0, 1.0]), np.array([[1.0, 2.0], [3.0, 4.0]])), [4.0, 6.0])


def test_outer_examples():
    e1, e2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    assert np.array_equal(outer(e1, e2), [[0.0, 1.0], [0.0, 0.0]])
    assert np.array_equal(outer(np.array([2.0]), np.array([3.0])), [[6.0]])
    assert np.array_equal(outer(np.array([1.0, -1.0]), np.array([0.5, 0.5])),
                          [[0.5, 0.5], [-0.5, -0.5]])


def test_outer_mean_averages_rows(rng):
    D = rng.normal(size=(4, 3))
    X = rng.normal(size=(4, 2))
    expected = sum(np.outer(D[b], X[b]) for b in range(4)) / 4
    np.testing.assert_allclose(outer_mean(D, X), expected, rtol=1e-12, atol=1e-14)


def test_ewise_examples():
    assert np.array_equal(ewise(np.array([1.0, -2.0]), np.array([3.0, 4.0]), "mul"), [3.0, -8.0])
    assert np.array_equal(ewise(np.array([-2.0]), np.array([0.5]), "abs_mul"), [1.0])
    a = np.array([1.5, -2.5])
    assert np.array_equal(ewise(a, np.array([7.0, 9.0]), "add_scaled", 0.0), a)


def test_norms_examples():
    n = norms(np.array([[3.0, -4.0]]))
    assert (n.inf, n.fro) == (4.0, 5.0)
    z = norms(np.zeros((2, 2)))
    assert (z.inf, z.fro) == (0.0, 0.0)
    i = norms(np.eye(2))
    assert i.inf == 1.0
    assert i.fro == pytest.approx(np.sqrt(2.0))


def test_rank_one_identities(rng):
    for _ in range(20):
        d, x, y = rng.normal(size=4), rng.normal(size=3), rng.normal(size=3)
        G = outer(d, x)
        assert norms(G).fro == pytest.approx(np.linalg.norm(d) * np.linalg.norm(x), rel=1e-12)
        np.testing.assert_allclose(matvec(G, y), d * np.dot(x, y), rtol=1e-12, atol=1e-14)


def test_operations_are_pure_and_repeatable(rng):
    W = rng.normal(size=(5, 4))
    x = rng.normal(size=4)
    W_copy, x_copy = W.copy(), x.copy()
    first = matvec(W, x)
    second = matvec(W, x)
    assert np.array_equal(first, second)
    assert np.array_equal(W, W_copy) and np.array_equal(x, x_copy)


@pytest.mark.parametrize("call", [
    lambda: matvec(np.ones((2, 3)), np.ones(2)),
    lambda: vecmat(np.ones(3), np.ones((2, 3))),
    lambda: ewise(np.ones(2), np.ones(3), "mul"),
    lambda: outer_mean(np.ones((2, 2)), np.ones((3, 2))),
    lambda: ewise(np.ones(2), np.ones(2), "pow"),
])
def test_dimension_mismatch_is_config_error(call):
    with pytest.raises(ConfigError):
        call()


def test_constructors_and_finite_check():
    assert as_vector([1, 2]).dtype == np.float64
    assert as_matrix([[1, 2]]).flags["C_CONTIGUOUS"]
    with pytest.raises(ConfigError):
        as_vector([])
    with pytest.raises(NumericalError) as info:
        check_finite(np.array([1.0, np.nan, np.inf]), "probe", stage=2)
    assert info.value.diagnostics["non_finite"] == 2
    assert info.value.diagnostics["stage"] == 2
