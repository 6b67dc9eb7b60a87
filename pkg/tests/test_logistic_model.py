import numpy as np
import pytest

from src.models.logistic_model import (
    FitConfig,
    ScoreModel,
    constant_model,
    fit_logistic,
    score,
    threshold_labels,
)
from src.utils.helpers import AlignmentError, ConvergenceError, ParameterError, SeparationError, sigmoid


def _simulated(n=20000, beta=(0.5, -1.0, 2.0), seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 2))
    p = sigmoid(beta[0] + X @ np.asarray(beta[1:]))
    y = (rng.random(n) < p).astype(int)
    return X, y


def test_recovers_generating_coefficients():
    X, y = _simulated()
    model = fit_logistic(X, y, feature_names=("u", "v"))
    assert model.feature_spec == ("u", "v")
    assert model.intercept == pytest.approx(0.5, abs=0.08)
    np.testing.assert_allclose(model.coefficients, [-1.0, 2.0], atol=0.08)
    assert model.diagnostics["gradient_max_norm"] <= 1e-8


def test_gradient_is_zero_at_the_optimum():
    X, y = _simulated(n=3000, seed=1)
    model = fit_logistic(X, y)
    p = model.predict_proba(X)
    design = np.hstack([np.ones((len(y), 1)), X])
    grad = design.T @ (p - y) / len(y)
    assert np.max(np.abs(grad)) <= 1e-8


def test_intercept_only_fit_matches_base_rate():
    y = np.array([1, 0, 0, 1, 0, 0, 0, 1, 0, 0])
    model = fit_logistic(np.zeros((10, 0)), y)
    assert sigmoid(model.intercept) == pytest.approx(0.3, abs=1e-9)


def test_weights_act_like_replication():
    X, y = _simulated(n=400, seed=2)
    weights = np.where(np.arange(400) % 2 == 0, 2.0, 1.0)
    replicated_X = np.vstack([X, X[::2]])
    replicated_y = np.concatenate([y, y[::2]])
    weighted = fit_logistic(X, y, weights=weights)
    replicated = fit_logistic(replicated_X, replicated_y)
    np.testing.assert_allclose(weighted.coefficients, replicated.coefficients, atol=1e-6)
    assert weighted.intercept == pytest.approx(replicated.intercept, abs=1e-6)


def test_penalty_shrinks_coefficients():
    X, y = _simulated(n=2000, seed=3)
    free = fit_logistic(X, y)
    shrunk = fit_logistic(X, y, config=FitConfig(l2_penalty=1.0))
    assert np.linalg.norm(shrunk.coefficients) < np.linalg.norm(free.coefficients)


def test_single_class_is_separation():
    with pytest.raises(SeparationError):
        fit_logistic(np.zeros((5, 1)), np.ones(5))


def test_perfectly_separated_data_is_reported():
    X = np.array([[-2.0], [-1.0], [1.0], [2.0]])
    y = np.array([0, 0, 1, 1])
    with pytest.raises(SeparationError):
        fit_logistic(X, y)


def test_penalized_fit_survives_separation():
    X = np.array([[-2.0], [-1.0], [1.0], [2.0]])
    y = np.array([0, 0, 1, 1])
    model = fit_logistic(X, y, config=FitConfig(l2_penalty=0.1))
    assert model.coefficients[0] > 0


def test_iteration_budget_exhaustion_carries_gradient():
    X, y = _simulated(n=1000, seed=4)
    with pytest.raises(ConvergenceError) as info:
        fit_logistic(X, y, config=FitConfig(max_iterations=1, gradient_tolerance=1e-14))
    assert info.value.iterations == 1
    assert info.value.gradient_norm > 1e-14


def test_misaligned_inputs_raise():
    with pytest.raises(AlignmentError):
        fit_logistic(np.zeros((4, 1)), np.array([0, 1, 0]))
    model = ScoreModel(("z", "a"), np.array([1.0, 0.5]), -0.5)
    with pytest.raises(AlignmentError):
        model.predict_proba(np.zeros((3, 3)))
    with pytest.raises(AlignmentError):
        ScoreModel(("z",), np.array([1.0, 2.0]), 0.0)


def test_score_single_vector():
    model = ScoreModel(("z", "a"), np.array([1.0, 0.5]), -0.5)
    assert score(model, [0.5, 1.0]) == pytest.approx(sigmoid(0.5))


def test_constant_model_ignores_features():
    model = constant_model(0.25, ("z", "a"))
    np.testing.assert_allclose(model.predict_proba(np.random.default_rng(0).normal(size=(6, 2))), 0.25)
    with pytest.raises(ParameterError):
        constant_model(1.0, ("z",))


def test_save_and_load(tmp_path):
    X, y = _simulated(n=500, seed=5)
    model = fit_logistic(X, y, feature_names=("z", "a"))
    loaded = ScoreModel.load(model.save(tmp_path / "model.json"))
    assert loaded.feature_spec == model.feature_spec
    np.testing.assert_array_equal(loaded.coefficients, model.coefficients)
    np.testing.assert_array_equal(loaded.predict_proba(X), model.predict_proba(X))


def test_threshold_labels():
    np.testing.assert_array_equal(threshold_labels([0.1, 0.5, 0.9], 0.5), [0, 1, 1])
    np.testing.assert_array_equal(threshold_labels([0.0, 0.3], 0.0), [1, 1])
    with pytest.raises(ParameterError):
        threshold_labels([0.5], 1.5)
