import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from icda.numerics import (ContractViolation, SingularityError, cholesky_psd, cosine, cosine_matrix,
                           log_sum_exp, make_rng, sample_mvn, softmax)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_log_sum_exp_hand_values():
    assert log_sum_exp([0.0, 0.0]) == pytest.approx(math.log(2), abs=1e-15)
    for x in (-700.0, -3.5, 0.0, 12.0, 800.0):
        assert log_sum_exp([x]) == x


def test_log_sum_exp_matches_naive_sum(rng):
    for _ in range(20):
        v = rng.uniform(-5, 5, 10)
        naive = math.log(sum(math.exp(x) for x in v))
        assert abs(log_sum_exp(v) - naive) / abs(naive) < 1e-14 or abs(log_sum_exp(v) - naive) < 1e-14


def test_log_sum_exp_rejects_empty():
    with pytest.raises(ContractViolation):
        log_sum_exp([])


@given(arrays(np.float64, st.integers(1, 12), elements=finite))
def test_log_sum_exp_bounds(v):
    lse = log_sum_exp(v)
    assert lse >= v.max() - 1e-12
    assert lse <= v.max() + math.log(v.size) + 1e-12


def test_softmax_examples():
    np.testing.assert_allclose(softmax([0.0, 0.0, 0.0]), [1 / 3] * 3, rtol=0, atol=1e-16)
    p = softmax([1000.0, 0.0])
    assert np.all(np.isfinite(p)) and p[0] == 1.0 and p[1] < 1e-300


def test_softmax_matches_naive(rng):
    v = rng.normal(size=7)
    e = np.exp(v)
    np.testing.assert_allclose(softmax(v), e / e.sum(), rtol=1e-14)
    assert softmax(v).sum() == pytest.approx(1.0, abs=1e-15)


@given(arrays(np.float64, st.integers(1, 8), elements=finite), st.floats(-100, 100))
def test_softmax_shift_invariance(v, shift):
    np.testing.assert_allclose(softmax(v + shift), softmax(v), atol=1e-12)


def test_cholesky_hand_examples():
    np.testing.assert_array_equal(cholesky_psd(np.eye(3)), np.eye(3))
    np.testing.assert_allclose(cholesky_psd(np.diag([4.0, 9.0])), [[2, 0], [0, 3]])


def test_cholesky_reconstruction_random(rng):
    for _ in range(1000):
        n = int(rng.integers(1, 17))
        A = rng.normal(size=(n, n))
        m = A.T @ A + 1e-6 * np.eye(n)
        L = cholesky_psd(m)
        assert np.max(np.abs(L @ L.T - m)) < 1e-8 * max(1.0, np.abs(m).max())


def test_cholesky_jitter_ladder_handles_singular():
    v = np.array([[1.0], [2.0]])
    m = v @ v.T  # rank one
    L = cholesky_psd(m)
    assert np.max(np.abs(L @ L.T - m)) < 1e-3


def test_cholesky_errors():
    with pytest.raises(ContractViolation):
        cholesky_psd(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(SingularityError):
        cholesky_psd(np.diag([1.0, -1.0]))


def test_sample_mvn_degenerate_and_clt():
    mean = np.array([0.3, -1.0])
    np.testing.assert_array_equal(sample_mvn(mean, np.zeros((2, 2)), make_rng(0)), mean)
    draws = sample_mvn(np.zeros(3), np.eye(3), make_rng(1), size=100_000)
    assert np.all(np.abs(draws.mean(axis=0)) < 0.02)
    np.testing.assert_allclose(np.cov(draws.T), np.eye(3), atol=0.02)


def test_sample_mvn_determinism():
    cov = np.array([[2.0, 0.3], [0.3, 1.0]])
    a = sample_mvn(np.ones(2), cov, make_rng(7), size=5)
    b = sample_mvn(np.ones(2), cov, make_rng(7), size=5)
    np.testing.assert_array_equal(a, b)


def test_cosine_examples():
    e1, e2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    assert cosine(e1, e1) == 1.0
    assert cosine(e1, e2) == 0.0
    assert cosine(np.zeros(2), e1) == 0.0


def test_cosine_matrix_matches_scalar(rng):
    h, w = rng.normal(size=(5, 3)), rng.normal(size=(4, 3))
    h[2] = 0.0
    expected = np.array([[cosine(a, b) for b in w] for a in h])
    np.testing.assert_allclose(cosine_matrix(h, w), expected, atol=1e-15)
