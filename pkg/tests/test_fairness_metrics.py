import json
import math

import numpy as np
import pytest

from src.fairness.metrics import (
    TABLE_COLUMNS,
    disparity,
    fairness_report,
    generalized_rate_table,
    group_metrics,
)
from src.utils.helpers import AlignmentError, ParameterError


def test_all_positive_scorer_has_trivial_rates(hand_dataset, hand_nuisances):
    metrics = group_metrics(hand_dataset, hand_nuisances, np.ones(8))
    for m in metrics:
        assert m.gfnr_obs.value == 0.0
        assert m.gfpr_obs.value == 1.0
        assert m.value("tpr", "observational") == 1.0


def test_counterfactual_mode_defaults(hand_dataset, hand_nuisances):
    with_nuisances = group_metrics(hand_dataset, hand_nuisances, np.full(8, 0.5))
    assert with_nuisances[0].counterfactual_mode == "dr"
    without = group_metrics(hand_dataset, None, np.full(8, 0.5))
    assert without[0].counterfactual_mode == "oracle"
    assert "dr" not in without[0].label_metrics["tpr"]


def test_control_rows_have_equal_observed_and_counterfactual_base_rates(hand_dataset):
    controls = hand_dataset.where(hand_dataset.t == 0)
    for m in group_metrics(controls, None, np.full(len(controls), 0.5)):
        assert m.base_rate_obs.value == m.base_rate_cf.value


def test_empty_conditioning_set_is_missing(hand_dataset):
    # rows with y = 1 only
    data = hand_dataset.where(np.array([1, 0, 1, 0, 1, 0, 0, 1], dtype=bool))
    metrics = group_metrics(data, None, np.full(len(data), 0.5))
    for m in metrics:
        assert m.gfpr_obs.missing
        assert math.isnan(m.gfpr_obs.value)


def test_disparity_is_group_one_minus_group_zero(hand_dataset, hand_nuisances):
    scores = np.array([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8])
    metrics = group_metrics(hand_dataset, hand_nuisances, scores)
    by_group = {m.group: m for m in metrics}
    expected = by_group[1].gfnr_obs.value - by_group[0].gfnr_obs.value
    assert disparity(metrics, "gfnr_obs") == pytest.approx(expected)
    assert disparity(list(reversed(metrics)), "gfnr_obs") == pytest.approx(expected)
    assert disparity([metrics[0], metrics[0]], "gfnr_obs") == 0.0
    with pytest.raises(ParameterError):
        disparity(metrics[:1], "gfnr_obs")
    with pytest.raises(ParameterError):
        metrics[0].value("tpr")


def test_single_group_and_misaligned_scores_raise(hand_dataset):
    with pytest.raises(ParameterError):
        group_metrics(hand_dataset.where(hand_dataset.a == 0), None, np.full(4, 0.5))
    with pytest.raises(AlignmentError):
        group_metrics(hand_dataset, None, np.full(3, 0.5))


def test_report_serializes(tmp_path, hand_dataset, hand_nuisances):
    metrics = group_metrics(hand_dataset, hand_nuisances, np.linspace(0.1, 0.8, 8))
    report = fairness_report(metrics)
    assert "gfnr_cf" in report.disparities
    assert "tpr_dr" in report.disparities
    path = report.save(tmp_path / "report.json")
    loaded = json.loads(path.read_text())
    assert len(loaded["groups"]) == 2
    table = generalized_rate_table(metrics, "Original")
    assert list(table.columns) == TABLE_COLUMNS
    assert list(table["group"]) == ["A=1", "A=0"]


@pytest.mark.slow
def test_symmetric_groups_agree(symmetric_experiment):
    test, nuisances = symmetric_experiment.test, symmetric_experiment.nuisances
    metrics = group_metrics(test, nuisances, symmetric_experiment.counterfactual_scores, clip_mode="winsorize")
    low, high = sorted(metrics, key=lambda m: m.group)
    for name in ("base_rate_obs", "gfnr_obs", "gfpr_obs", "gfnr_cf", "gfpr_cf"):
        a, b = getattr(low, name), getattr(high, name)
        assert abs(a.value - b.value) < 3 * math.hypot(a.stderr, b.stderr), name


@pytest.mark.slow
def test_original_generalized_rates(biased_experiment):
    metrics = group_metrics(
        biased_experiment.test,
        biased_experiment.nuisances,
        biased_experiment.counterfactual_scores,
        clip_mode="winsorize",
    )
    table = generalized_rate_table(metrics, "Original").set_index("group")
    expected = {
        "A=1": {"cGFNR": 0.50, "cGFPR": 0.33, "oGFNR": 0.58, "oGFPR": 0.39},
        "A=0": {"cGFNR": 0.50, "cGFPR": 0.33, "oGFNR": 0.56, "oGFPR": 0.39},
    }
    for group, row in expected.items():
        for column, value in row.items():
            assert table.loc[group, column] == pytest.approx(value, abs=0.03), (group, column)
