from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from sklearn.metrics import auc

from src.data_generation.synthetic_data import OracleDataset
from src.evaluation import estimators as est
from src.evaluation.estimators import DEFAULT_CLIP, Estimate, mean_estimate
from src.models.logistic_model import threshold_labels
from src.models.nuisance import NuisanceSet
from src.utils.helpers import AlignmentError, ParameterError, UndefinedMetricError
from src.utils.logger import get_logger

logger = get_logger(__name__)

CURVE_COLUMNS = ["model", "mode", "curve", "param", "x", "y", "ci_low", "ci_high"]
DEFAULT_THRESHOLDS = np.linspace(0.0, 1.0, 101)
DEFAULT_BINS = 10


class EvalMode(str, Enum):
    OBSERVATIONAL = "observational"
    CONTROL = "control"
    DR = "dr"
    ORACLE = "oracle"


@dataclass(frozen=True)
class CurvePoint:
    param: float
    x: float
    y: float
    ci_low: float = float("nan")
    ci_high: float = float("nan")
    n: int = 0


@dataclass
class Curve:
    name: str
    mode: EvalMode
    model_id: str
    points: List[CurvePoint] = field(default_factory=list)
    omitted: List[float] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {
                "model": self.model_id,
                "mode": self.mode.value,
                "curve": self.name,
                "param": p.param,
                "x": p.x,
                "y": p.y,
                "ci_low": p.ci_low,
                "ci_high": p.ci_high,
            }
            for p in self.points
        ]
        return pd.DataFrame(rows, columns=CURVE_COLUMNS)

    def area(self) -> float:
        """Trapezoid area under y(x), with points ordered by x."""
        if len(self.points) < 2:
            return float("nan")
        xy = np.array(sorted((p.x, p.y) for p in self.points))
        return float(auc(xy[:, 0], xy[:, 1]))


def _outcome_population(mode: EvalMode, dataset: OracleDataset):
    if mode == EvalMode.OBSERVATIONAL:
        return dataset.y, np.ones(len(dataset), dtype=bool)
    if mode == EvalMode.CONTROL:
        return dataset.y, dataset.t == 0
    if mode == EvalMode.ORACLE:
        if not dataset.has_oracle:
            raise ParameterError("oracle evaluation needs the y0 column")
        return dataset.y0, np.ones(len(dataset), dtype=bool)
    raise ParameterError(f"mode {mode} has no observed outcome column")


def _direct_metric(metric, mode, dataset, values, r1, r2, include_upper) -> Estimate:
    outcome, population = _outcome_population(mode, dataset)
    kind = mode.value
    if metric == "base_rate":
        return mean_estimate(outcome[population], metric, kind)
    if metric == "tpr":
        return mean_estimate(values[population & (outcome == 1)], metric, kind)
    if metric == "fpr":
        return mean_estimate(values[population & (outcome == 0)], metric, kind)
    if metric == "precision":
        return mean_estimate(outcome[population & (values == 1)], metric, kind)
    if metric == "calibration_bin":
        in_bin = (values >= r1) & ((values <= r2) if include_upper else (values < r2))
        return mean_estimate(outcome[population & in_bin], metric, kind, reference=(r1 + r2) / 2.0)
    if metric == "gfnr":
        return mean_estimate(1.0 - values[population & (outcome == 1)], metric, kind)
    if metric == "gfpr":
        return mean_estimate(values[population & (outcome == 0)], metric, kind)
    raise ParameterError(f"unknown metric {metric!r}")


def metric_under_mode(
    metric: str,
    mode,
    dataset: OracleDataset,
    nuisances: Optional[NuisanceSet] = None,
    scores_or_labels=None,
    r1: Optional[float] = None,
    r2: Optional[float] = None,
    clip: float = DEFAULT_CLIP,
    clip_mode: str = "error",
    include_upper: bool = True,
) -> Estimate:
    """One metric evaluated under one mode; empty conditioning sets give a missing estimate.

    Label metrics (tpr, fpr, precision) take 0/1 predictions; score metrics
    (calibration_bin, gfnr, gfpr) take scores; base_rate takes neither.
    Calibration bins are [r1, r2], or [r1, r2) with `include_upper=False`.
    """
    mode = EvalMode(mode)
    if metric == "calibration_bin" and (r1 is None or r2 is None or not r1 < r2):
        raise ParameterError("calibration_bin needs a bin r1 < r2")
    values = None
    if metric != "base_rate":
        if scores_or_labels is None:
            raise ParameterError(f"{metric} needs scores or predicted labels")
        values = np.asarray(scores_or_labels, dtype=float)
        if len(values) != len(dataset):
            raise AlignmentError(f"{len(values)} scores/labels for {len(dataset)} rows")

    if mode != EvalMode.DR:
        return _direct_metric(metric, mode, dataset, values, r1, r2, include_upper)

    if nuisances is None:
        raise ParameterError("doubly-robust evaluation needs nuisance estimates")
    kwargs = {"clip": clip, "clip_mode": clip_mode}
    try:
        if metric == "base_rate":
            y0_mean = est.estimate_mean_y0(dataset, nuisances, "dr", **kwargs)
            return Estimate("base_rate", "dr", y0_mean.value, y0_mean.stderr, y0_mean.n_effective)
        if metric == "tpr":
            return est.dr_tpr(dataset, nuisances, values, **kwargs)
        if metric == "fpr":
            return est.dr_fpr(dataset, nuisances, values, **kwargs)
        if metric == "precision":
            return est.dr_precision(dataset, nuisances, values, **kwargs)
        if metric == "calibration_bin":
            return est.dr_calibration_bin(dataset, nuisances, values, r1, r2, include_upper=include_upper, **kwargs)
        if metric == "gfnr":
            return est.dr_gfnr(dataset, nuisances, values, **kwargs)
        if metric == "gfpr":
            return est.dr_gfpr(dataset, nuisances, values, **kwargs)
    except UndefinedMetricError as e:
        return Estimate.missing_value(metric, "dr", reason=str(e))
    raise ParameterError(f"unknown metric {metric!r}")


def _thresholds(thresholds) -> np.ndarray:
    thresholds = DEFAULT_THRESHOLDS if thresholds is None else np.asarray(thresholds, dtype=float)
    if thresholds.size == 0:
        raise ParameterError("thresholds must not be empty")
    if np.any(np.diff(thresholds) < 0):
        raise ParameterError("thresholds must be sorted")
    return thresholds


def _label_curve(name, x_metric, y_metric, ci_from, mode, dataset, nuisances, scores, thresholds, model_id, **kwargs):
    mode = EvalMode(mode)
    scores = np.asarray(scores, dtype=float)
    curve = Curve(name=name, mode=mode, model_id=model_id)
    for threshold in _thresholds(thresholds):
        labels = threshold_labels(scores, float(threshold))
        x = metric_under_mode(x_metric, mode, dataset, nuisances, labels, **kwargs)
        y = metric_under_mode(y_metric, mode, dataset, nuisances, labels, **kwargs)
        if x.missing or y.missing:
            curve.omitted.append(float(threshold))
            continue
        band = y if ci_from == "y" else x
        curve.points.append(CurvePoint(float(threshold), x.value, y.value, band.ci_low, band.ci_high, y.n_effective))
    if curve.omitted:
        logger.warning(
            f"{name} curve ({mode.value}, {model_id}): omitted {len(curve.omitted)} undefined thresholds"
        )
    return curve


def pr_curve(mode, dataset, nuisances, scores, thresholds=None, model_id: str = "model", **kwargs) -> Curve:
    """Precision (y) against TPR (x) at each threshold."""
    return _label_curve("pr", "tpr", "precision", "y", mode, dataset, nuisances, scores, thresholds, model_id, **kwargs)


def roc_curve(mode, dataset, nuisances, scores, thresholds=None, model_id: str = "model", **kwargs) -> Curve:
    """TPR (y) against FPR (x) at each threshold."""
    return _label_curve("roc", "fpr", "tpr", "y", mode, dataset, nuisances, scores, thresholds, model_id, **kwargs)


def calibration_curve(
    mode, dataset, nuisances, scores, n_bins: int = DEFAULT_BINS, model_id: str = "model", **kwargs
) -> Curve:
    """Outcome mean per equal-width score bin on [0, 1]; x is the bin midpoint.

    Bins are half-open [r1, r2) except the last, which also holds 1.0.
    """
    if n_bins < 1:
        raise ParameterError("n_bins must be at least 1")
    mode = EvalMode(mode)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    curve = Curve(name="calibration", mode=mode, model_id=model_id)
    for b in range(n_bins):
        r1, r2 = float(edges[b]), float(edges[b + 1])
        estimate = metric_under_mode(
            "calibration_bin", mode, dataset, nuisances, scores, r1=r1, r2=r2, include_upper=b == n_bins - 1, **kwargs
        )
        if estimate.missing:
            curve.omitted.append(float(b))
            continue
        curve.points.append(
            CurvePoint(float(b), (r1 + r2) / 2.0, estimate.value, estimate.ci_low, estimate.ci_high, estimate.n_effective)
        )
    return curve


def max_pointwise_gap(curve: Curve, reference: Curve, min_count: int = 0) -> float:
    """Largest |y difference| over parameters present in both curves."""
    ref = {p.param: p for p in reference.points if p.n >= min_count}
    gaps = [abs(p.y - ref[p.param].y) for p in curve.points if p.param in ref and p.n >= min_count]
    return float(max(gaps)) if gaps else float("nan")


def curves_frame(curves: Sequence[Curve]) -> pd.DataFrame:
    frames = [c.to_frame() for c in curves]
    if not frames:
        return pd.DataFrame(columns=CURVE_COLUMNS)
    return pd.concat(frames, ignore_index=True)


def all_curves(
    dataset, nuisances, scores, model_id: str, modes=tuple(EvalMode), thresholds=None, n_bins: int = DEFAULT_BINS, **kwargs
) -> Dict[str, Curve]:
    """PR, ROC and calibration curves of one scorer under each requested mode."""
    curves = {}
    for mode in modes:
        mode = EvalMode(mode)
        if mode == EvalMode.ORACLE and not dataset.has_oracle:
            continue
        if mode == EvalMode.DR and nuisances is None:
            continue
        curves[f"pr/{mode.value}"] = pr_curve(mode, dataset, nuisances, scores, thresholds, model_id, **kwargs)
        curves[f"roc/{mode.value}"] = roc_curve(mode, dataset, nuisances, scores, thresholds, model_id, **kwargs)
        curves[f"calibration/{mode.value}"] = calibration_curve(mode, dataset, nuisances, scores, n_bins, model_id, **kwargs)
    return curves
