import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from deepmpc.adaptive import (AdaptiveWeights, FeatureMap, adaptive_control, adaptive_sup_bound,
                              lemma1_bound, project_columns, projection_inequality_check,
                              update_step, validate_learning_rate, weight_update,
                              windowed_ms_check)
from deepmpc.errors import DimensionError, InvalidInputError

B = np.array([[0.0], [0.05]])


def _weights(K, theta=0.5, bounds=(10.0,), sigma=2.0):
    return AdaptiveWeights(np.asarray(K, float), theta, np.asarray(bounds), sigma)


def test_zero_weights_give_zero_control():
    w = AdaptiveWeights.zeros(4, 1, 0.1, [1.0], 2.0)
    assert adaptive_control(w, lambda x: np.ones(4), [0.1, 0.2])[0] == 0.0


def test_adaptive_control_inner_product():
    w = _weights([[1.0], [0.0], [0.0], [0.0]])
    phi = FeatureMap(lambda x: np.array([0.5, 0.3, -0.2, 1.0]), 4, 2.0)
    assert adaptive_control(w, phi, [0, 0])[0] == pytest.approx(-0.5)


def test_adaptive_control_saturates_bound():
    sigma = 2.0
    phi_x = np.array([1.0, 1.0, 1.0, 1.0])
    w = _weights((phi_x / np.linalg.norm(phi_x) * 3.0)[:, None], bounds=[3.0], sigma=sigma)
    u = adaptive_control(w, lambda x: phi_x, None)
    assert abs(u[0]) == pytest.approx(adaptive_sup_bound(w))


def test_weight_update_zero_innovation_is_identity():
    K = np.array([[0.2], [0.1]])
    w = _weights(K)
    new = weight_update(w, [1.0, 0.0], B, [0.3, 0.4], [0.3, 0.4])
    np.testing.assert_array_equal(new.K, K)


def test_weight_update_worked_example():
    # u_a = -K'phi, so the increment of K follows +theta phi u_tilde'.
    K = np.array([[0.1], [0.2]])
    w = _weights(K, theta=0.5)
    new, K_bar, u_tilde = update_step(w, [1.0, 0.0], B, [0.0, 0.1], [0.0, 0.0])
    assert u_tilde[0] == pytest.approx(2.0)
    np.testing.assert_allclose(K_bar, K + np.array([[1.0], [0.0]]), atol=1e-12)
    np.testing.assert_allclose(new.K, K_bar, atol=1e-12)


def test_weight_update_rank_deficient_keeps_weights():
    K = np.array([[0.1], [0.2]])
    w = _weights(K)
    new, _, u_tilde = update_step(w, [1.0, 0.0], np.zeros((2, 1)), [0.0, 0.1], [0.0, 0.0])
    assert u_tilde is None
    np.testing.assert_array_equal(new.K, K)


def test_weight_update_shape_check():
    with pytest.raises(DimensionError):
        weight_update(_weights([[0.0], [0.0]]), [1.0, 0.0, 0.0], B, [0, 0], [0, 0])


def test_update_recovers_u_a_plus_h():
    # Measured transition from u_total = u_m + u_a with uncertainty h.
    rng = np.random.default_rng(0)
    A = np.array([[1.0, 0.05], [0.0, 1.0]])
    for _ in range(20):
        x = rng.normal(size=2)
        u_m, u_a, h = rng.normal(size=3)
        x_next = A @ x + B[:, 0] * (u_m + u_a + h)
        x_nom = A @ x + B[:, 0] * u_m
        _, _, ut = update_step(_weights([[0.0]], bounds=[1.0]), [1.0], B, x_next, x_nom)
        assert ut[0] == pytest.approx(u_a + h, abs=1e-12)


def test_project_columns_examples():
    np.testing.assert_allclose(project_columns([[3.0], [4.0]], [1.0]), [[0.6], [0.8]])
    np.testing.assert_array_equal(project_columns([[0.3], [0.4]], [1.0]), [[0.3], [0.4]])
    np.testing.assert_array_equal(project_columns([[0.0], [0.0]], [2.0]), [[0.0], [0.0]])
    out = project_columns([[3.0, 0.1], [4.0, 0.0]], [1.0, 1.0])
    np.testing.assert_allclose(out, [[0.6, 0.1], [0.8, 0.0]])


def test_projection_inequality_examples():
    K = np.array([[0.2], [0.1]])
    assert projection_inequality_check(K, K, [[0.5], [0.0]], [1.0])
    K1 = project_columns([[3.0]], [1.0])
    for W in np.linspace(-1, 1, 21):
        assert (K1[0, 0] - W) * (3.0 - K1[0, 0]) >= 0
        assert projection_inequality_check(K1, [[3.0]], [[W]], [1.0])
    with pytest.raises(InvalidInputError):
        projection_inequality_check(K1, [[3.0]], [[1.5]], [1.0])


@settings(max_examples=300, deadline=None)
@given(arrays(np.float64, (4, 2), elements=st.floats(-50, 50)),
       arrays(np.float64, (4, 2), elements=st.floats(-1, 1)),
       st.floats(0.01, 5.0), st.floats(0.01, 5.0))
def test_projection_inequality_property(K_bar, direction, b1, b2):
    bounds = np.array([b1, b2])
    K = project_columns(K_bar, bounds)
    assert np.all(np.linalg.norm(K, axis=0) <= bounds * (1 + 1e-12))
    norms = np.linalg.norm(direction, axis=0)
    W = np.where(norms > 1, direction / np.maximum(norms, 1e-300), direction) * bounds
    inner = np.sum((K - W) * (K_bar - K), axis=0)
    assert np.all(inner >= -1e-12 * (1 + np.abs(K_bar).max()) ** 2)


def test_sup_bound_examples():
    assert adaptive_sup_bound(_weights([[0.0]], bounds=[2.0], sigma=2.0)) == pytest.approx(4.0)
    assert adaptive_sup_bound(_weights([[0.0]], bounds=[0.0])) == 0.0
    w = AdaptiveWeights(np.zeros((3, 2)), 0.1, [3.0, 4.0], 1.0)
    assert adaptive_sup_bound(w) == pytest.approx(5.0)
    assert w.W_bar == pytest.approx(25.0)


def test_lemma1_bound_examples():
    assert lemma1_bound(0.1, 1.0, 1.0, 0.1, 10) == pytest.approx(44.55556, abs=1e-5)
    assert lemma1_bound(0.1, 1.0, 0.0, 0.0, 10) == 0.0
    a = lemma1_bound(0.1, 1.0, 1.0, 0.1, 10)
    b = lemma1_bound(0.1, 1.0, 1.0, 0.1, 20)
    assert b - a == pytest.approx(10 * (1 / 0.9) * 0.01)
    with pytest.raises(InvalidInputError):
        lemma1_bound(0.5, 2.0, 1.0, 0.0, 1)


def test_learning_rate_validation():
    w = AdaptiveWeights(np.zeros((4, 1)), 0.9, [0.5], 2.0)
    with pytest.warns(RuntimeWarning):
        assert not validate_learning_rate(w)
    with pytest.raises(InvalidInputError):
        validate_learning_rate(w, strict=True)
    assert validate_learning_rate(AdaptiveWeights(np.zeros((4, 1)), 0.1, [0.5], 2.0))


def test_windowed_check_zero_and_failing():
    rep = windowed_ms_check(np.zeros((50, 1)), 0.1, 1.0, 1.0, 0.0)
    assert rep.passed and rep.max_ratio == 0.0
    # Bound is 4 c0 W / theta = 44.44 for every length; 50 steps of 1 exceed it.
    rep = windowed_ms_check(np.ones(50), 0.1, 1.0, 1.0, 0.0)
    assert not rep.passed
    assert rep.worst_length == 50 and rep.max_ratio == pytest.approx(50 / (4 / 0.9 / 0.1))


def test_windowed_check_matches_brute_force(rng):
    res = rng.normal(size=(40, 1)) * 0.5
    rep = windowed_ms_check(res, 0.2, 1.0, 0.3, 0.05)
    worst = 0.0
    for k in range(40):
        for n in range(1, 41 - k):
            worst = max(worst, np.sum(res[k:k + n] ** 2) / lemma1_bound(0.2, 1.0, 0.3, 0.05, n))
    assert rep.max_ratio == pytest.approx(worst)


def test_adaptation_on_structured_target_respects_mean_square_bound(rng):
    # Direct recursion K <- proj(K + theta phi u_tilde') with u_tilde = (W* - K)' phi.
    sigma, theta, bound = 2.0, 0.1, 1.0
    W = rng.normal(size=(4, 1))
    W *= 0.8 * bound / np.linalg.norm(W)
    w = AdaptiveWeights(np.zeros((4, 1)), theta, [bound], sigma)
    res = []
    for _ in range(500):
        phi = np.append(np.tanh(rng.normal(size=3)), 1.0)
        ut = (W - w.K).T @ phi
        x_nom = np.zeros(2)
        w = weight_update(w, phi, B, x_nom + B[:, 0] * ut, x_nom)
        res.append(ut)
    rep = windowed_ms_check(np.array(res), theta, sigma, bound ** 2, 0.0)
    assert rep.passed
