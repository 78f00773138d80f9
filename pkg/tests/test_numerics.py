import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from deepmpc.errors import InvalidInputError
from deepmpc.numerics import (TruncatedNormalSampler, dare_residual, dare_solve,
                              min_singular_value, pseudo_inverse, sample_truncated_normal)


def _mp_residuals(M, X):
    return (np.max(np.abs(M @ X @ M - M)), np.max(np.abs(X @ M @ X - X)),
            np.max(np.abs((M @ X).T - M @ X)), np.max(np.abs((X @ M).T - X @ M)))


def test_pinv_rank_one_column():
    X, rank = pseudo_inverse([[0.0], [0.05]])
    np.testing.assert_allclose(X, [[0.0, 20.0]], atol=1e-12)
    assert rank == 1


def test_pinv_identity_and_zero():
    X, rank = pseudo_inverse(np.eye(2))
    np.testing.assert_allclose(X, np.eye(2), atol=1e-15)
    assert rank == 2
    X, rank = pseudo_inverse(np.zeros((2, 1)))
    np.testing.assert_array_equal(X, np.zeros((1, 2)))
    assert rank == 0


def test_pinv_moore_penrose_random(rng):
    for _ in range(100):
        r, c = rng.integers(1, 7, size=2)
        M = rng.normal(size=(r, c))
        X, _ = pseudo_inverse(M)
        assert max(_mp_residuals(M, X)) <= 1e-9


def test_pinv_rank_deficient_product(rng):
    M = rng.normal(size=(5, 2)) @ rng.normal(size=(2, 4))
    X, rank = pseudo_inverse(M)
    assert rank == 2
    assert max(_mp_residuals(M, X)) <= 1e-9


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)),
              elements=st.floats(-10, 10)))
def test_pinv_matches_numpy(M):
    X, _ = pseudo_inverse(M)
    # Independent route: numpy's own SVD-based pinv at the same relative cutoff.
    np.testing.assert_allclose(X, np.linalg.pinv(M, rcond=1e-10), atol=1e-8 * (1 + np.abs(X).max()))


def test_pinv_rejects_bad_input():
    with pytest.raises(InvalidInputError):
        pseudo_inverse([[np.nan]])
    with pytest.raises(InvalidInputError):
        pseudo_inverse(np.eye(2), rank_tol=0.0)


def test_dare_scalar_golden_ratio():
    P, K = dare_solve([[1.0]], [[1.0]], [[1.0]], [[1.0]])
    np.testing.assert_allclose(P, [[(1 + np.sqrt(5)) / 2]], atol=1e-9)
    np.testing.assert_allclose(K, P / (1 + P), atol=1e-12)


def test_dare_one_step_cost():
    P, K = dare_solve(np.zeros((2, 2)), np.eye(2), np.eye(2), np.eye(2))
    np.testing.assert_allclose(P, np.eye(2), atol=1e-12)
    np.testing.assert_allclose(K, np.zeros((2, 2)), atol=1e-12)


def test_dare_wing_rock_residual_and_scipy_oracle(wing_rock):
    A, B = wing_rock.A, wing_rock.B
    Q, R = np.eye(2), np.array([[0.1]])
    P, K = dare_solve(A, B, Q, R)
    assert dare_residual(P, A, B, Q, R) <= 1e-8
    np.testing.assert_allclose(P, scipy.linalg.solve_discrete_are(A, B, Q, R), rtol=1e-7)
    # Closed loop is stable.
    assert np.max(np.abs(np.linalg.eigvals(A - B @ K))) < 1


def test_dare_rejects_indefinite_weights():
    with pytest.raises(InvalidInputError):
        dare_solve([[1.0]], [[1.0]], [[-1.0]], [[1.0]])


def test_min_singular_value_examples():
    assert min_singular_value(np.eye(2)) == pytest.approx(1.0)
    assert min_singular_value([[1.0, 0.0], [1.0, 0.0]]) == pytest.approx(0.0, abs=1e-15)
    # Rows [1,0],[0,1],[1,1] give M'M = [[2,1],[1,2]].
    G = np.array([[2.0, 1.0], [1.0, 2.0]])
    lam = (np.trace(G) - np.sqrt(np.trace(G) ** 2 - 4 * np.linalg.det(G))) / 2
    assert min_singular_value([[1, 0], [0, 1], [1, 1]]) == pytest.approx(np.sqrt(lam), abs=1e-12)
    assert min_singular_value([[1.0, 2.0, 3.0]]) == 0.0


def test_truncated_normal_support_and_mean():
    w0 = 0.457
    s = TruncatedNormalSampler(0.0, w0 / 2, -w0, w0, rng_seed=3)
    draws = s.sample_many(1_000_000)
    assert np.all(np.abs(draws) <= w0)
    assert abs(draws[:100_000].mean()) <= 0.01
    assert all(abs(sample_truncated_normal(s)) <= w0 for _ in range(1000))


def test_truncated_normal_same_seed_bit_exact():
    a = TruncatedNormalSampler(0.0, 0.2, -0.4, 0.4, rng_seed=7)
    b = TruncatedNormalSampler(0.0, 0.2, -0.4, 0.4, rng_seed=7)
    xs = [a.sample() for _ in range(500)]
    ys = [b.sample() for _ in range(500)]
    assert xs == ys


def test_truncated_normal_degenerate_window():
    lo, eps = 3.0, 1e-9
    s = TruncatedNormalSampler(0.0, 0.1, lo, lo + eps, rng_seed=0)
    v = s.sample()
    assert lo <= v <= lo + eps
    assert TruncatedNormalSampler(0.5, 0.0, -0.1, 0.1).sample() == 0.1


def test_truncated_normal_rejects_bad_window():
    with pytest.raises(InvalidInputError):
        TruncatedNormalSampler(0.0, 1.0, 1.0, 1.0)
