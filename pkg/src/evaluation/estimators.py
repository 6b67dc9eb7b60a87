"""Plug-in, IPW and doubly-robust estimates of performance under the baseline decision.

Every counterfactual metric is built from the per-row pseudo-outcome

    phi_i = (1 - t_i) / (1 - pi_hat_i) * (y_i - s0_i) + s0_i,

whose mean estimates E[Y0]. Ratio metrics (TPR, FPR, generalized rates) get
their standard error from the delta method on a ratio of two means; the
conditional metrics (precision, calibration bins) use the spread of phi
inside the conditioning set. Intervals are normal approximations.
"""
import math
from dataclasses import dataclass, field, replace
from typing import Dict, Optional

import numpy as np

from src.data_generation.synthetic_data import OracleDataset
from src.models.nuisance import NuisanceSet, check_aligned
from src.utils.helpers import (
    Z_95,
    AlignmentError,
    ParameterError,
    PositivityError,
    UndefinedMetricError,
    as_binary,
)
from src.utils.logger import get_logger

logger = get_logger(__name__)

KINDS = ("plugin", "ipw", "dr", "observational", "control", "oracle")
METRICS = ("mean_y0", "tpr", "fpr", "precision", "calibration_bin", "gfnr", "gfpr", "base_rate")
CLIP_MODES = ("error", "winsorize")
DEFAULT_CLIP = 0.01


@dataclass(frozen=True)
class Estimate:
    metric: str
    kind: str
    value: float
    stderr: float
    n_effective: int
    reference: Optional[float] = None
    missing: bool = False
    extras: Dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown estimator kind {self.kind!r}")
        if self.metric not in METRICS:
            raise ParameterError(f"unknown metric {self.metric!r}")

    @property
    def ci_low(self) -> float:
        return self.value - Z_95 * self.stderr

    @property
    def ci_high(self) -> float:
        return self.value + Z_95 * self.stderr

    @property
    def value_clipped(self) -> float:
        """Value truncated to [0, 1] for plotting; DR values themselves may leave it."""
        return float(np.clip(self.value, 0.0, 1.0)) if not math.isnan(self.value) else self.value

    def to_dict(self) -> Dict:
        record = {
            "metric": self.metric,
            "kind": self.kind,
            "value": self.value,
            "value_clipped": self.value_clipped,
            "stderr": self.stderr,
            "ci": [self.ci_low, self.ci_high],
            "n": self.n_effective,
            "missing": self.missing,
        }
        if self.reference is not None:
            record["reference"] = self.reference
        record.update(self.extras)
        return record

    @classmethod
    def missing_value(cls, metric: str, kind: str, reference: Optional[float] = None, reason: str = "") -> "Estimate":
        extras = {"reason": reason} if reason else {}
        return cls(metric, kind, float("nan"), float("nan"), 0, reference=reference, missing=True, extras=extras)


@dataclass(frozen=True)
class PseudoOutcomeVector:
    values: np.ndarray

    def __len__(self) -> int:
        return len(self.values)

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


def _stderr(terms: np.ndarray) -> float:
    if terms.size < 2:
        return float("nan")
    return float(np.std(terms, ddof=1) / math.sqrt(terms.size))


def mean_estimate(terms, metric: str, kind: str, reference: Optional[float] = None) -> Estimate:
    """Sample mean of per-row terms with stderr sd / sqrt(n)."""
    terms = np.asarray(terms, dtype=float)
    if terms.size == 0:
        return Estimate.missing_value(metric, kind, reference=reference, reason="empty conditioning set")
    return Estimate(metric, kind, float(terms.mean()), _stderr(terms), int(terms.size), reference=reference)


def ratio_estimate(numerator_terms, denominator_terms, metric: str, kind: str) -> Estimate:
    """mean(num) / mean(den) with a delta-method standard error."""
    num = np.asarray(numerator_terms, dtype=float)
    den = np.asarray(denominator_terms, dtype=float)
    n = num.size
    if n == 0:
        raise UndefinedMetricError(f"{metric}: no rows")
    num_mean, den_mean = float(num.mean()), float(den.mean())
    if den_mean <= 0:
        raise UndefinedMetricError(f"{metric}: denominator estimate {den_mean:.4g} is not positive")
    value = num_mean / den_mean
    if n < 2:
        return Estimate(metric, kind, value, float("nan"), n)
    cov = np.cov(num, den, ddof=1)
    variance = (
        cov[0, 0] / den_mean**2 - 2.0 * num_mean * cov[0, 1] / den_mean**3 + num_mean**2 * cov[1, 1] / den_mean**4
    ) / n
    return Estimate(metric, kind, value, float(math.sqrt(max(variance, 0.0))), n)


def checked_propensity(propensity, clip: float = DEFAULT_CLIP, clip_mode: str = "error") -> np.ndarray:
    """Propensities with the positivity bound pi_hat <= 1 - clip enforced."""
    if not 0.0 <= clip < 1.0:
        raise ParameterError(f"clip must lie in [0, 1), got {clip}")
    if clip_mode not in CLIP_MODES:
        raise ParameterError(f"clip_mode must be one of {CLIP_MODES}")
    propensity = np.asarray(propensity, dtype=float)
    bound = 1.0 - clip
    over = np.flatnonzero(propensity > bound)
    if over.size:
        if clip_mode == "error":
            raise PositivityError(
                f"{over.size} rows have propensity above {bound} (first rows {over[:10].tolist()}); "
                "raise clip or use clip_mode='winsorize'",
                rows=over,
            )
        logger.warning(f"Winsorized {over.size} propensities at {bound}")
        propensity = np.minimum(propensity, bound)
    return propensity


def _control_weights(dataset: OracleDataset, nuisances: NuisanceSet, clip: float, clip_mode: str) -> np.ndarray:
    check_aligned(dataset, nuisances)
    pi_hat = checked_propensity(nuisances.propensity, clip, clip_mode)
    return (1 - dataset.t) / (1.0 - pi_hat)


def pseudo_outcomes(
    dataset: OracleDataset, nuisances: NuisanceSet, clip: float = DEFAULT_CLIP, clip_mode: str = "error"
) -> PseudoOutcomeVector:
    """phi_i = (1 - t_i) / (1 - pi_hat_i) * (y_i - s0_i) + s0_i; treated rows collapse to s0_i."""
    weights = _control_weights(dataset, nuisances, clip, clip_mode)
    s0 = nuisances.cf_scores
    return PseudoOutcomeVector(weights * (dataset.y - s0) + s0)


def _complement_terms(dataset: OracleDataset, nuisances: NuisanceSet, clip: float, clip_mode: str) -> np.ndarray:
    # Per-row terms whose mean is 1 - DR_{Y0}.
    weights = _control_weights(dataset, nuisances, clip, clip_mode)
    s0 = nuisances.cf_scores
    return weights * (s0 - dataset.y) + (1.0 - s0)


def estimate_mean_y0(
    dataset: OracleDataset,
    nuisances: NuisanceSet,
    method: str = "dr",
    clip: float = DEFAULT_CLIP,
    clip_mode: str = "error",
) -> Estimate:
    """E[Y0] by the plug-in, IPW or doubly-robust estimator."""
    check_aligned(dataset, nuisances)
    if method == "plugin":
        terms = nuisances.cf_scores
    elif method == "ipw":
        terms = _control_weights(dataset, nuisances, clip, clip_mode) * dataset.y
    elif method == "dr":
        terms = pseudo_outcomes(dataset, nuisances, clip, clip_mode).values
    else:
        raise ParameterError(f"method must be plugin, ipw or dr, got {method!r}")
    return mean_estimate(terms, "mean_y0", method)


def _labels(dataset: OracleDataset, predicted_labels) -> np.ndarray:
    labels = as_binary(predicted_labels, "predicted_labels")
    if len(labels) != len(dataset):
        raise AlignmentError(f"{len(labels)} predicted labels for {len(dataset)} rows")
    return labels


def _scores(dataset: OracleDataset, scores) -> np.ndarray:
    scores = np.asarray(scores, dtype=float)
    if scores.ndim != 1 or len(scores) != len(dataset):
        raise AlignmentError(f"expected {len(dataset)} scores, got shape {scores.shape}")
    return scores


def dr_tpr(dataset, nuisances, predicted_labels, clip: float = DEFAULT_CLIP, clip_mode: str = "error") -> Estimate:
    """Counterfactual TPR, E[Y_hat | Y0 = 1]."""
    labels = _labels(dataset, predicted_labels)
    phi = pseudo_outcomes(dataset, nuisances, clip, clip_mode).values
    return ratio_estimate(labels * phi, phi, "tpr", "dr")


def dr_fpr(dataset, nuisances, predicted_labels, clip: float = DEFAULT_CLIP, clip_mode: str = "error") -> Estimate:
    """Counterfactual FPR, E[Y_hat | Y0 = 0]."""
    labels = _labels(dataset, predicted_labels)
    complement = _complement_terms(dataset, nuisances, clip, clip_mode)
    return ratio_estimate(labels * complement, complement, "fpr", "dr")


def dr_gfnr(dataset, nuisances, scores, clip: float = DEFAULT_CLIP, clip_mode: str = "error") -> Estimate:
    """Counterfactual generalized FNR, E[1 - s(X) | Y0 = 1]: the TPR estimator with scores for labels."""
    scores = _scores(dataset, scores)
    phi = pseudo_outcomes(dataset, nuisances, clip, clip_mode).values
    return ratio_estimate((1.0 - scores) * phi, phi, "gfnr", "dr")


def dr_gfpr(dataset, nuisances, scores, clip: float = DEFAULT_CLIP, clip_mode: str = "error") -> Estimate:
    """Counterfactual generalized FPR, E[s(X) | Y0 = 0]."""
    scores = _scores(dataset, scores)
    complement = _complement_terms(dataset, nuisances, clip, clip_mode)
    return ratio_estimate(scores * complement, complement, "gfpr", "dr")


def dr_precision(dataset, nuisances, predicted_labels, clip: float = DEFAULT_CLIP, clip_mode: str = "error") -> Estimate:
    """Counterfactual precision, E[Y0 | Y_hat = 1]; may exceed 1 in finite samples."""
    labels = _labels(dataset, predicted_labels)
    if not labels.any():
        raise UndefinedMetricError("precision is undefined without predicted positives")
    phi = pseudo_outcomes(dataset, nuisances, clip, clip_mode).values
    return mean_estimate(phi[labels == 1], "precision", "dr")


def dr_calibration_bin(
    dataset,
    nuisances,
    scores,
    r1: float,
    r2: float,
    clip: float = DEFAULT_CLIP,
    clip_mode: str = "error",
    include_upper: bool = True,
) -> Estimate:
    """E[Y0 | r1 <= s(X) <= r2]; the bin midpoint is attached as the reference value.

    `include_upper=False` makes the bin [r1, r2), as calibration curves use for
    every bin but the last.
    """
    if not r1 < r2:
        raise ParameterError(f"calibration bin needs r1 < r2, got [{r1}, {r2}]")
    scores = _scores(dataset, scores)
    reference = (r1 + r2) / 2.0
    in_bin = (scores >= r1) & ((scores <= r2) if include_upper else (scores < r2))
    if not in_bin.any():
        return Estimate.missing_value("calibration_bin", "dr", reference=reference, reason="empty bin")
    phi = pseudo_outcomes(dataset, nuisances, clip, clip_mode).values
    return mean_estimate(phi[in_bin], "calibration_bin", "dr", reference=reference)


def with_kind(estimate: Estimate, kind: str) -> Estimate:
    return replace(estimate, kind=kind)
