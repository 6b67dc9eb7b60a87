import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from src.data_generation.synthetic_data import OracleDataset
from src.evaluation.curves import EvalMode, metric_under_mode
from src.evaluation.estimators import DEFAULT_CLIP, Estimate
from src.models.logistic_model import threshold_labels
from src.models.nuisance import NuisanceSet
from src.utils.helpers import AlignmentError, ParameterError, write_json
from src.utils.logger import get_logger

logger = get_logger(__name__)

TABLE_COLUMNS = ["group", "method", "cGFNR", "cGFPR", "oGFNR", "oGFPR"]


@dataclass
class GroupMetrics:
    group: int
    n_rows: int
    base_rate_obs: Estimate
    base_rate_cf: Estimate
    gfnr_obs: Estimate
    gfpr_obs: Estimate
    gfnr_cf: Estimate
    gfpr_cf: Estimate
    # metric name -> mode -> estimate
    label_metrics: Dict[str, Dict[str, Estimate]] = field(default_factory=dict)
    counterfactual_mode: str = EvalMode.DR.value

    def value(self, name: str, mode: Optional[str] = None) -> float:
        """Value of a named entry; label metrics (tpr, fpr, precision) also need a mode."""
        if name in self.label_metrics:
            if mode is None:
                raise ParameterError(f"{name} needs an evaluation mode")
            estimate = self.label_metrics[name].get(EvalMode(mode).value)
            return float("nan") if estimate is None else estimate.value
        estimate = getattr(self, name, None)
        if not isinstance(estimate, Estimate):
            raise ParameterError(f"unknown group metric {name!r}")
        return estimate.value

    def to_dict(self) -> Dict:
        record = {
            "group": self.group,
            "n_rows": self.n_rows,
            "counterfactual_mode": self.counterfactual_mode,
        }
        for name in ("base_rate_obs", "base_rate_cf", "gfnr_obs", "gfpr_obs", "gfnr_cf", "gfpr_cf"):
            record[name] = getattr(self, name).to_dict()
        record["label_metrics"] = {
            metric: {mode: e.to_dict() for mode, e in by_mode.items()} for metric, by_mode in self.label_metrics.items()
        }
        return record


def group_metrics(
    dataset: OracleDataset,
    nuisances: Optional[NuisanceSet],
    scores,
    labels=None,
    by_group: str = "a",
    threshold: float = 0.5,
    counterfactual_mode=None,
    clip: float = DEFAULT_CLIP,
    clip_mode: str = "error",
) -> List[GroupMetrics]:
    """Observational and counterfactual metrics for each value of the group column.

    Counterfactual entries use the doubly-robust estimators when nuisances are
    given and the oracle y0 column otherwise, unless counterfactual_mode says.
    """
    scores = np.asarray(scores, dtype=float)
    if len(scores) != len(dataset):
        raise AlignmentError(f"{len(scores)} scores for {len(dataset)} rows")
    labels = threshold_labels(scores, threshold) if labels is None else np.asarray(labels)
    if len(labels) != len(dataset):
        raise AlignmentError(f"{len(labels)} labels for {len(dataset)} rows")
    if counterfactual_mode is None:
        counterfactual_mode = EvalMode.DR if nuisances is not None else EvalMode.ORACLE
    cf_mode = EvalMode(counterfactual_mode)

    group_values = dataset.column(by_group)
    groups = sorted(np.unique(group_values).tolist())
    if len(groups) < 2:
        raise ParameterError(f"column {by_group!r} needs at least two groups, found {groups}")

    label_modes = [EvalMode.OBSERVATIONAL, EvalMode.CONTROL]
    if nuisances is not None:
        label_modes.append(EvalMode.DR)
    if dataset.has_oracle:
        label_modes.append(EvalMode.ORACLE)

    results = []
    for group in groups:
        idx = np.flatnonzero(group_values == group)
        sub = dataset.take(idx)
        sub_nuisances = nuisances.take(idx) if nuisances is not None else None
        sub_scores, sub_labels = scores[idx], labels[idx]

        def evaluate(metric, mode, values=None):
            return metric_under_mode(
                metric, mode, sub, sub_nuisances, values, clip=clip, clip_mode=clip_mode
            )

        label_metrics = {
            metric: {mode.value: evaluate(metric, mode, sub_labels) for mode in label_modes}
            for metric in ("tpr", "fpr", "precision")
        }
        results.append(
            GroupMetrics(
                group=int(group),
                n_rows=len(idx),
                base_rate_obs=evaluate("base_rate", EvalMode.OBSERVATIONAL),
                base_rate_cf=evaluate("base_rate", cf_mode),
                gfnr_obs=evaluate("gfnr", EvalMode.OBSERVATIONAL, sub_scores),
                gfpr_obs=evaluate("gfpr", EvalMode.OBSERVATIONAL, sub_scores),
                gfnr_cf=evaluate("gfnr", cf_mode, sub_scores),
                gfpr_cf=evaluate("gfpr", cf_mode, sub_scores),
                label_metrics=label_metrics,
                counterfactual_mode=cf_mode.value,
            )
        )
    return results


def disparity(metrics: List[GroupMetrics], name: str, mode: Optional[str] = None) -> float:
    """value(group 1) - value(group 0); missing entries give NaN."""
    if len(metrics) != 2:
        raise ParameterError(f"disparity needs exactly two groups, got {len(metrics)}")
    low, high = sorted(metrics, key=lambda m: m.group)
    return high.value(name, mode) - low.value(name, mode)


def generalized_rate_table(metrics: List[GroupMetrics], method: str) -> pd.DataFrame:
    """Rows of group, method, cGFNR, cGFPR, oGFNR, oGFPR (highest group first)."""
    rows = [
        {
            "group": f"A={m.group}",
            "method": method,
            "cGFNR": m.gfnr_cf.value,
            "cGFPR": m.gfpr_cf.value,
            "oGFNR": m.gfnr_obs.value,
            "oGFPR": m.gfpr_obs.value,
        }
        for m in sorted(metrics, key=lambda m: -m.group)
    ]
    return pd.DataFrame(rows, columns=TABLE_COLUMNS)


DISPARITY_NAMES = ("base_rate_obs", "base_rate_cf", "gfnr_obs", "gfpr_obs", "gfnr_cf", "gfpr_cf")


@dataclass
class FairnessReport:
    groups: List[GroupMetrics]
    disparities: Dict[str, float]
    residuals: List = field(default_factory=list)
    independence: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {
            "groups": [g.to_dict() for g in self.groups],
            "disparities": {k: (None if math.isnan(v) else v) for k, v in self.disparities.items()},
            "residuals": [r.to_dict() for r in self.residuals],
            "independence": {
                condition: [check.to_dict() for check in checks] for condition, checks in self.independence.items()
            },
        }

    def save(self, filepath):
        return write_json(self.to_dict(), filepath)


def fairness_report(metrics: List[GroupMetrics], residuals=None, independence=None) -> FairnessReport:
    disparities = {}
    if len(metrics) == 2:
        for name in DISPARITY_NAMES:
            disparities[name] = disparity(metrics, name)
        for metric in ("tpr", "fpr", "precision"):
            for mode in metrics[0].label_metrics.get(metric, {}):
                disparities[f"{metric}_{mode}"] = disparity(metrics, metric, mode)
    return FairnessReport(groups=metrics, disparities=disparities, residuals=residuals or [], independence=independence or {})
