import numpy as np
import pytest

from src.fairness.corrections import (
    DEFAULT_K_GRID,
    MixingPolicy,
    apply_mixing,
    combined_table,
    fit_mixing_policy,
    kamiran_weights,
    postprocess_equalized_odds,
    postprocess_experiment,
    reweigh_experiment,
    weighted_group_rate,
)
from src.utils.helpers import ParameterError
from tests.conftest import REFERENCE_N, REFERENCE_SEED, make_dataset


def _labelled(a, y):
    return make_dataset(a=a, t=np.zeros(len(a), dtype=int), y=y)


def _generalized_rates(scores, dataset, group):
    in_group = dataset.a == group
    s, y = scores[in_group], dataset.y[in_group]
    return np.mean(1 - s[y == 1]), np.mean(s[y == 0])


def _random_scored(rng, n=40):
    a = rng.integers(0, 2, n)
    y = rng.integers(0, 2, n)
    # both labels in both groups
    a[:4], y[:4] = [0, 0, 1, 1], [0, 1, 0, 1]
    return _labelled(a, y), rng.random(n)


def test_kamiran_weights_on_small_table():
    data = _labelled(a=[0, 0, 0, 0, 1, 1, 1, 1], y=[0, 0, 0, 1, 0, 1, 1, 1])
    plan = kamiran_weights(data)
    assert plan.weights[(1, 1)] == pytest.approx(2 / 3)
    assert plan.weights[(1, 0)] == pytest.approx(2.0)
    assert plan.weights[(0, 1)] == pytest.approx(2.0)
    assert plan.weights[(0, 0)] == pytest.approx(2 / 3)
    assert plan.counts[(1, 1)] == 3
    assert plan.row_weights(data).sum() == pytest.approx(len(data))


def test_weights_are_one_when_label_independent_of_group():
    data = _labelled(a=[0, 0, 1, 1], y=[0, 1, 0, 1])
    assert all(w == pytest.approx(1.0) for w in kamiran_weights(data).weights.values())


def test_reweigh_identity_on_random_tables():
    rng = np.random.default_rng(11)
    for _ in range(150):
        data, _ = _random_scored(rng, n=int(rng.integers(8, 60)))
        w = kamiran_weights(data).row_weights(data)
        rate0, _ = weighted_group_rate(data.y, data.a, w, 0)
        rate1, _ = weighted_group_rate(data.y, data.a, w, 1)
        assert rate1 - rate0 == pytest.approx(0.0, abs=1e-12)


def test_empty_cell_cannot_be_reweighed():
    with pytest.raises(ParameterError):
        kamiran_weights(_labelled(a=[0, 0, 1, 1], y=[0, 1, 1, 1]))


def test_identity_mixing_leaves_scores_unchanged():
    data, scores = _random_scored(np.random.default_rng(2))
    for randomize in (True, False):
        result = postprocess_equalized_odds(data, scores, mixing_rates={0: 0.0, 1: 0.0}, randomize=randomize)
        np.testing.assert_array_equal(result.adjusted_scores, scores)
        assert not result.mixed.any()


def test_full_mixing_gives_trivial_predictor():
    data, scores = _random_scored(np.random.default_rng(3))
    result = postprocess_equalized_odds(data, scores, mixing_rates={0: 1.0, 1: 1.0})
    for group in (0, 1):
        mu = data.y[data.a == group].mean()
        np.testing.assert_allclose(result.adjusted_scores[data.a == group], mu)
        gfnr, gfpr = _generalized_rates(result.adjusted_scores, data, group)
        assert gfnr == pytest.approx(1 - mu, abs=1e-12)
        assert gfpr == pytest.approx(mu, abs=1e-12)


def test_expected_mixing_matches_closed_form():
    rng = np.random.default_rng(5)
    for _ in range(120):
        data, scores = _random_scored(rng)
        rates = {0: float(rng.random()), 1: float(rng.random())}
        result = postprocess_equalized_odds(data, scores, mixing_rates=rates, randomize=False)
        for group in (0, 1):
            before = _generalized_rates(scores, data, group)
            after = _generalized_rates(result.adjusted_scores, data, group)
            expected = result.policy.expected_rates(*before, group)
            assert after[0] == pytest.approx(expected[0], abs=1e-12)
            assert after[1] == pytest.approx(expected[1], abs=1e-12)


def test_randomized_mixing_only_touches_mixed_rows():
    data, scores = _random_scored(np.random.default_rng(7), n=400)
    result = postprocess_equalized_odds(data, scores, mixing_rates={0: 0.3, 1: 0.6}, seed=9)
    mixed = result.mixed
    np.testing.assert_array_equal(result.adjusted_scores[~mixed], scores[~mixed])
    for group in (0, 1):
        in_group = mixed & (data.a == group)
        np.testing.assert_allclose(result.adjusted_scores[in_group], result.policy.base_rates[group])
    again = postprocess_equalized_odds(data, scores, mixing_rates={0: 0.3, 1: 0.6}, seed=9)
    np.testing.assert_array_equal(again.mixed, mixed)


def test_equal_groups_need_no_mixing():
    y = np.array([0, 1, 1, 0, 1])
    s = np.array([0.2, 0.7, 0.4, 0.5, 0.9])
    data = _labelled(a=np.repeat([0, 1], 5), y=np.tile(y, 2))
    policy = fit_mixing_policy(data, np.tile(s, 2))
    assert policy.mixing_rates == {0: 0.0, 1: 0.0}
    assert policy.diagnostics["objective"] == pytest.approx(0.0)


def test_fitted_policy_does_not_increase_disparity():
    rng = np.random.default_rng(8)
    data, scores = _random_scored(rng, n=200)
    scores[data.a == 1] = np.clip(scores[data.a == 1] + 0.3, 0, 1)
    policy = fit_mixing_policy(data, scores)
    before = policy.diagnostics["before"]
    after = policy.diagnostics["expected_after"]
    gap_before = (before["gfnr"][1] - before["gfnr"][0]) ** 2 + (before["gfpr"][1] - before["gfpr"][0]) ** 2
    gap_after = (after["gfnr"][1] - after["gfnr"][0]) ** 2 + (after["gfpr"][1] - after["gfpr"][0]) ** 2
    assert gap_after <= gap_before
    assert gap_after == pytest.approx(policy.diagnostics["objective"])


def test_mixing_stops_once_disparities_are_within_tolerance():
    # group 0 already scores its base rate; group 1 has gfnr 0.2 and gfpr 0.3
    data = _labelled(a=[0, 0, 1, 1], y=[0, 1, 0, 1])
    scores = [0.5, 0.5, 0.3, 0.8]
    exact = fit_mixing_policy(data, scores, tolerance=0.0)
    assert exact.mixing_rates == {0: 0.0, 1: 1.0}
    assert not exact.diagnostics["within_tolerance"]
    mild = fit_mixing_policy(data, scores)
    assert mild.mixing_rates == {0: 0.0, 1: pytest.approx(0.97)}
    assert mild.diagnostics["within_tolerance"]
    loose = fit_mixing_policy(data, scores, tolerance=0.05)
    assert loose.mixing_rates == {0: 0.0, 1: pytest.approx(0.84)}
    after = loose.diagnostics["expected_after"]
    assert abs(after["gfnr"][1] - after["gfnr"][0]) <= 0.05
    assert abs(after["gfpr"][1] - after["gfpr"][0]) <= 0.05
    with pytest.raises(ParameterError):
        fit_mixing_policy(data, scores, tolerance=-0.1)


def test_degenerate_base_rate_is_rejected():
    data = _labelled(a=[0, 0, 1, 1], y=[0, 0, 0, 1])
    with pytest.raises(ParameterError):
        fit_mixing_policy(data, [0.1, 0.2, 0.3, 0.4])
    with pytest.raises(ParameterError):
        MixingPolicy(mixing_rates={0: 1.5}, base_rates={0: 0.5})


def test_scores_outside_unit_interval_are_rejected():
    data = _labelled(a=[0, 0, 1, 1], y=[0, 1, 0, 1])
    with pytest.raises(ParameterError):
        fit_mixing_policy(data, [0.1, 1.2, 0.3, 0.4])


def test_mixing_is_applied_to_other_rows():
    data, scores = _random_scored(np.random.default_rng(12))
    policy = MixingPolicy(mixing_rates={0: 0.5, 1: 0.0}, base_rates={0: 0.25, 1: 0.5})
    adjusted, mixed = apply_mixing(policy, data, scores, randomize=False)
    in_zero = data.a == 0
    np.testing.assert_allclose(adjusted[in_zero], 0.5 * scores[in_zero] + 0.125)
    np.testing.assert_array_equal(adjusted[~in_zero], scores[~in_zero])
    assert mixed.sum() == in_zero.sum()


def test_empty_grids_are_rejected():
    with pytest.raises(ParameterError):
        reweigh_experiment(k_grid=())
    with pytest.raises(ParameterError):
        postprocess_experiment(c_grid=())
    assert list(combined_table([]).columns[:2]) == ["c", "k"]


@pytest.mark.slow
def test_reweighing_equalizes_observed_but_not_counterfactual_rates():
    frame = reweigh_experiment(k_grid=DEFAULT_K_GRID, n=REFERENCE_N, seed=REFERENCE_SEED, n_jobs=1)
    assert list(frame["k"]) == [0.0, 0.4, 0.8, 1.2, 1.6, 2.0]
    assert np.all(np.abs(frame["obs_disparity_after"]) < 1e-12)
    cf = frame["cf_disparity_after"].abs().to_numpy()
    assert np.all(np.diff(cf) > 0)
    biased = frame[frame["k"] >= 0.8]
    assert np.all(biased["cf_disparity_after"].abs() > 3 * biased["cf_disparity_after_se"])


@pytest.mark.slow
def test_postprocessing_equalizes_observed_rates():
    (result,) = postprocess_experiment(n=REFERENCE_N, seed=REFERENCE_SEED, randomize=False, n_jobs=1)
    table = result["table"]
    post = table[table["method"] == "Post-Proc."].set_index("group")
    assert abs(post.loc["A=1", "oGFNR"] - post.loc["A=0", "oGFNR"]) < 0.02
    assert abs(post.loc["A=1", "oGFPR"] - post.loc["A=0", "oGFPR"]) < 0.02
    assert len(result["curves"]) == 8
    assert result["mixed_fraction"] > 0.0
    rates = result["policy"].mixing_rates
    assert max(rates.values()) <= 0.5
    assert rates[0] > rates[1]
