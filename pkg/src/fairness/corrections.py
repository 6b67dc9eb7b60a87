"""Fairness-corrective procedures and their experiment harnesses.

Two corrections are provided: reweighing the training data to equal observed
base rates, and post-processing scores toward equal generalized observed
error rates by mixing each group with its trivial predictor.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from src.data_generation.synthetic_data import GeneratorParams, OracleDataset
from src.evaluation.curves import EvalMode, roc_curve
from src.experiments.pipeline import PIPELINE_CLIP_MODE, prepare_experiment
from src.fairness.metrics import TABLE_COLUMNS, generalized_rate_table, group_metrics
from src.models.logistic_model import FitConfig
from src.models.nuisance import fit_observational
from src.utils.config import get_settings
from src.utils.helpers import ParameterError, build, check_length, substream
from src.utils.logger import get_logger

logger = get_logger(__name__)

MIXING_STREAM = 1
DEFAULT_STEP = 0.01
DEFAULT_TOLERANCE = 0.01
# treatment-bias values swept by default
DEFAULT_K_GRID = (0.0, 0.4, 0.8, 1.2, 1.6, 2.0)


@dataclass
class ReweighPlan:
    weights: Dict[Tuple[int, int], float]
    counts: Dict[Tuple[int, int], int]
    group_column: str = "a"
    label_column: str = "y"
    note: str = "w(a, y) = P(A=a) P(Y=y) / P(A=a, Y=y); weights sum to n"

    def row_weights(self, dataset: OracleDataset) -> np.ndarray:
        groups = dataset.column(self.group_column)
        labels = dataset.column(self.label_column)
        out = np.empty(len(dataset), dtype=float)
        for (a, y), w in self.weights.items():
            out[(groups == a) & (labels == y)] = w
        return out

    def to_dict(self) -> Dict:
        return {
            "group_column": self.group_column,
            "label_column": self.label_column,
            "weights": [{"a": a, "y": y, "weight": w, "count": self.counts[(a, y)]} for (a, y), w in sorted(self.weights.items())],
            "note": self.note,
        }


def kamiran_weights(dataset: OracleDataset, group_column: str = "a", label_column: str = "y") -> ReweighPlan:
    """Cell weights that make the observed label independent of the group."""
    groups = dataset.column(group_column)
    labels = dataset.column(label_column)
    n = len(dataset)
    weights, counts = {}, {}
    for a in (0, 1):
        for y in (0, 1):
            n_ay = int(np.count_nonzero((groups == a) & (labels == y)))
            if n_ay == 0:
                raise ParameterError(f"reweighing needs every (a, y) cell; ({group_column}={a}, {label_column}={y}) is empty")
            p_a = np.count_nonzero(groups == a) / n
            p_y = np.count_nonzero(labels == y) / n
            weights[(a, y)] = p_a * p_y / (n_ay / n)
            counts[(a, y)] = n_ay
    return ReweighPlan(weights=weights, counts=counts, group_column=group_column, label_column=label_column)


def weighted_group_rate(values, groups, weights, group: int) -> Tuple[float, float]:
    """Weighted mean of a 0/1 column within one group, with its standard error."""
    mask = groups == group
    w, v = weights[mask], values[mask]
    total = w.sum()
    if total <= 0:
        return float("nan"), float("nan")
    mean = float(np.dot(w, v) / total)
    stderr = float(math.sqrt(np.sum(w**2 * (v - mean) ** 2)) / total)
    return mean, stderr


def _reweigh_point(k: float, c: float, n: int, seed: int, config: Optional[FitConfig], n_jobs: int) -> Dict:
    params = build(GeneratorParams, n=n, c=c, k=k, seed=seed)
    experiment = prepare_experiment(params, config=config, n_jobs=n_jobs)
    data = experiment.dataset
    plan = kamiran_weights(data)
    a = data.a
    uniform = np.ones(len(data))
    weighted = plan.row_weights(data)

    row = {"k": k, "c": c, "n": n, "seed": seed}
    for stage, w in (("before", uniform), ("after", weighted)):
        se_cf = []
        for group in (0, 1):
            row[f"obs_rate_a{group}_{stage}"], _ = weighted_group_rate(data.y, a, w, group)
            row[f"cf_rate_a{group}_{stage}"], se = weighted_group_rate(data.y0, a, w, group)
            se_cf.append(se)
        row[f"obs_disparity_{stage}"] = row[f"obs_rate_a1_{stage}"] - row[f"obs_rate_a0_{stage}"]
        row[f"cf_disparity_{stage}"] = row[f"cf_rate_a1_{stage}"] - row[f"cf_rate_a0_{stage}"]
        row[f"cf_disparity_{stage}_se"] = math.sqrt(se_cf[0] ** 2 + se_cf[1] ** 2)

    # reweighed training of the observational model, scored on the test rows
    train_plan = kamiran_weights(experiment.train)
    model = fit_observational(experiment.train, config=config, weights=train_plan.row_weights(experiment.train))
    predicted = model.predict_proba(experiment.test.features(model.feature_spec))
    for group in (0, 1):
        row[f"model_rate_a{group}"] = float(predicted[experiment.test.a == group].mean())
    row["model_disparity"] = row["model_rate_a1"] - row["model_rate_a0"]
    row["weights"] = {f"{a_}{y_}": w for (a_, y_), w in plan.weights.items()}
    logger.info(
        f"k={k}: observed disparity {row['obs_disparity_before']:.4f} -> {row['obs_disparity_after']:.2e}, "
        f"counterfactual {row['cf_disparity_before']:.4f} -> {row['cf_disparity_after']:.4f}"
    )
    return row


def reweigh_experiment(
    k_grid: Sequence[float] = DEFAULT_K_GRID,
    c: float = 0.1,
    n: int = 100000,
    seed: int = 0,
    config: Optional[FitConfig] = None,
    n_jobs: Optional[int] = None,
) -> pd.DataFrame:
    """Observed and counterfactual group base rates before and after reweighing, per k.

    Every grid point reuses `seed`, so the series differ only through k.
    """
    if len(k_grid) == 0:
        raise ParameterError("k_grid must not be empty")
    n_jobs = get_settings().n_jobs if n_jobs is None else n_jobs
    rows = Parallel(n_jobs=n_jobs)(delayed(_reweigh_point)(float(k), c, n, seed, config, 1) for k in k_grid)
    return pd.DataFrame(rows)


@dataclass
class MixingPolicy:
    """Per-group mixing rates toward the group's trivial predictor."""

    mixing_rates: Dict[int, float]
    base_rates: Dict[int, float]
    group_column: str = "a"
    diagnostics: Dict = field(default_factory=dict)

    def __post_init__(self):
        for group, rate in self.mixing_rates.items():
            if not 0.0 <= rate <= 1.0:
                raise ParameterError(f"mixing rate for group {group} must lie in [0, 1], got {rate}")
        for group, mu in self.base_rates.items():
            if not 0.0 < mu < 1.0:
                raise ParameterError(f"group {group} has degenerate base rate {mu}")

    def expected_rates(self, gfnr: float, gfpr: float, group: int, rate: Optional[float] = None) -> Tuple[float, float]:
        """Closed-form generalized FNR and FPR of the mixed scorer."""
        lam = self.mixing_rates[group] if rate is None else rate
        mu = self.base_rates[group]
        return (1 - lam) * gfnr + lam * (1 - mu), (1 - lam) * gfpr + lam * mu

    def to_dict(self) -> Dict:
        return {
            "group_column": self.group_column,
            "mixing_rates": {str(g): r for g, r in self.mixing_rates.items()},
            "base_rates": {str(g): m for g, m in self.base_rates.items()},
            "diagnostics": self.diagnostics,
        }


def _group_rates(scores: np.ndarray, labels: np.ndarray, groups: np.ndarray, group: int) -> Tuple[float, float, float]:
    in_group = groups == group
    y = labels[in_group]
    s = scores[in_group]
    mu = float(y.mean()) if y.size else float("nan")
    if not 0.0 < mu < 1.0:
        raise ParameterError(f"group {group} has degenerate base rate {mu}")
    return float(np.mean(1 - s[y == 1])), float(np.mean(s[y == 0])), mu


def fit_mixing_policy(
    dataset: OracleDataset,
    scores,
    group_column: str = "a",
    step: float = DEFAULT_STEP,
    tolerance: float = DEFAULT_TOLERANCE,
) -> MixingPolicy:
    """Grid search over (lambda_0, lambda_1) for the mildest mixing that equalizes generalized rates.

    Candidates are grid points where both the GFNR and the GFPR disparity are
    within `tolerance` and the squared disparity does not exceed the unmixed one.
    The smallest lambda_0 + lambda_1 wins, then the smaller squared disparity,
    then the smaller lambda_0. With no candidate, or with `tolerance=0`, the
    squared-disparity minimiser is used.
    """
    scores = np.asarray(scores, dtype=float)
    check_length(len(dataset), scores=scores)
    if scores.size and (scores.min() < 0 or scores.max() > 1):
        raise ParameterError("scores must lie in [0, 1]")
    if not 0.0 < step <= 1.0:
        raise ParameterError(f"step must lie in (0, 1], got {step}")
    if tolerance < 0:
        raise ParameterError(f"tolerance must be non-negative, got {tolerance}")
    groups = dataset.column(group_column)
    present = sorted(np.unique(groups).tolist())
    if present != [0, 1]:
        raise ParameterError(f"post-processing needs groups 0 and 1 in {group_column!r}, found {present}")

    fnr0, fpr0, mu0 = _group_rates(scores, dataset.y, groups, 0)
    fnr1, fpr1, mu1 = _group_rates(scores, dataset.y, groups, 1)
    grid = np.round(np.arange(0.0, 1.0 + step / 2, step), 10)
    grid = grid[grid <= 1.0]
    # rows index lambda_0, columns lambda_1
    d_fnr = ((1 - grid) * fnr1 + grid * (1 - mu1))[None, :] - ((1 - grid) * fnr0 + grid * (1 - mu0))[:, None]
    d_fpr = ((1 - grid) * fpr1 + grid * mu1)[None, :] - ((1 - grid) * fpr0 + grid * mu0)[:, None]
    objective = d_fnr**2 + d_fpr**2
    candidates = (
        (np.abs(d_fnr) <= tolerance + 1e-12) & (np.abs(d_fpr) <= tolerance + 1e-12) & (objective <= objective[0, 0])
    )
    within = bool(tolerance > 0 and candidates.any())
    if not within:
        candidates = objective <= objective.min() + 1e-15
    i_idx, j_idx = np.nonzero(candidates)
    total = np.round(grid[i_idx] + grid[j_idx], 10)
    order = np.lexsort((grid[i_idx], objective[i_idx, j_idx], total))
    i, j = i_idx[order[0]], j_idx[order[0]]

    policy = MixingPolicy(
        mixing_rates={0: float(grid[i]), 1: float(grid[j])},
        base_rates={0: mu0, 1: mu1},
        group_column=group_column,
    )
    policy.diagnostics = {
        "step": step,
        "tolerance": tolerance,
        "within_tolerance": within,
        "objective": float(objective[i, j]),
        "before": {"gfnr": {0: fnr0, 1: fnr1}, "gfpr": {0: fpr0, 1: fpr1}},
        "expected_after": {
            "gfnr": {g: policy.expected_rates(f, p, g)[0] for g, f, p in ((0, fnr0, fpr0), (1, fnr1, fpr1))},
            "gfpr": {g: policy.expected_rates(f, p, g)[1] for g, f, p in ((0, fnr0, fpr0), (1, fnr1, fpr1))},
        },
    }
    logger.info(f"Mixing rates {policy.mixing_rates} (objective {policy.diagnostics['objective']:.2e})")
    return policy


def apply_mixing(
    policy: MixingPolicy, dataset: OracleDataset, scores, seed: int = 0, randomize: bool = True
) -> Tuple[np.ndarray, np.ndarray]:
    """Adjusted scores and the mask of rows whose score was changed.

    Randomized mode replaces a row's score by its group base rate with
    probability lambda_g; otherwise each score becomes (1 - lambda_g) s + lambda_g mu_g.
    """
    scores = np.asarray(scores, dtype=float)
    check_length(len(dataset), scores=scores)
    groups = dataset.column(policy.group_column)
    lam = np.zeros(len(scores))
    mu = np.zeros(len(scores))
    for group, rate in policy.mixing_rates.items():
        lam[groups == group] = rate
        mu[groups == group] = policy.base_rates[group]
    if randomize:
        draws = substream(seed, MIXING_STREAM).random(len(scores))
        mixed = draws < lam
        adjusted = np.where(mixed, mu, scores)
    else:
        mixed = lam > 0
        adjusted = np.where(mixed, (1 - lam) * scores + lam * mu, scores)
    return adjusted, mixed


@dataclass
class PostProcessResult:
    adjusted_scores: np.ndarray
    policy: MixingPolicy
    mixed: np.ndarray


def postprocess_equalized_odds(
    dataset: OracleDataset,
    scores,
    by_group: str = "a",
    seed: int = 0,
    mixing_rates: Optional[Dict[int, float]] = None,
    randomize: bool = True,
    step: float = DEFAULT_STEP,
    tolerance: float = DEFAULT_TOLERANCE,
) -> PostProcessResult:
    """Fit (or take) a mixing policy on `dataset` and apply it to the same rows."""
    if mixing_rates is None:
        policy = fit_mixing_policy(dataset, scores, by_group, step, tolerance)
    else:
        groups = dataset.column(by_group)
        base_rates = {g: float(dataset.y[groups == g].mean()) if np.any(groups == g) else float("nan") for g in (0, 1)}
        policy = MixingPolicy(
            mixing_rates={int(g): float(r) for g, r in mixing_rates.items()},
            base_rates=base_rates,
            group_column=by_group,
            diagnostics={"forced": True},
        )
    adjusted, mixed = apply_mixing(policy, dataset, scores, seed=seed, randomize=randomize)
    return PostProcessResult(adjusted_scores=adjusted, policy=policy, mixed=mixed)


def _group_roc_curves(dataset, nuisances, scores, stage: str, clip_mode: str, thresholds=None) -> List:
    curves = []
    a = dataset.a
    for group in (0, 1):
        idx = np.flatnonzero(a == group)
        sub, sub_nuisances = dataset.take(idx), nuisances.take(idx)
        for mode in (EvalMode.DR, EvalMode.ORACLE):
            curves.append(
                roc_curve(
                    mode, sub, sub_nuisances, scores[idx], thresholds, model_id=f"A={group}/{stage}", clip_mode=clip_mode
                )
            )
    return curves


def _postprocess_point(
    c: float,
    k: float,
    n: int,
    seed: int,
    threshold: float,
    randomize: bool,
    config: Optional[FitConfig],
    clip_mode: str,
) -> Dict:
    params = build(GeneratorParams, n=n, c=c, k=k, seed=seed)
    experiment = prepare_experiment(params, config=config, clip_mode=clip_mode, n_jobs=1)
    test, nuisances = experiment.test, experiment.nuisances

    policy = fit_mixing_policy(experiment.train, experiment.train_nuisances.cf_scores)
    original = experiment.counterfactual_scores
    adjusted, mixed = apply_mixing(policy, test, original, seed=seed, randomize=randomize)

    before = group_metrics(test, nuisances, original, threshold=threshold, clip_mode=clip_mode)
    after = group_metrics(test, nuisances, adjusted, threshold=threshold, clip_mode=clip_mode)
    table = pd.concat(
        [generalized_rate_table(before, "Original"), generalized_rate_table(after, "Post-Proc.")], ignore_index=True
    )
    table.insert(0, "k", k)
    table.insert(0, "c", c)
    curves = _group_roc_curves(test, nuisances, original, "original", clip_mode) + _group_roc_curves(
        test, nuisances, adjusted, "postprocessed", clip_mode
    )
    return {
        "c": c,
        "k": k,
        "seed": seed,
        "table": table,
        "policy": policy,
        "curves": curves,
        "mixed_fraction": float(mixed.mean()),
        "split": experiment.split_record(),
    }


def postprocess_experiment(
    c_grid: Sequence[float] = (0.1,),
    k_grid: Sequence[float] = (1.6,),
    n: int = 100000,
    seed: int = 0,
    threshold: float = 0.5,
    randomize: bool = True,
    config: Optional[FitConfig] = None,
    clip_mode: str = PIPELINE_CLIP_MODE,
    n_jobs: Optional[int] = None,
) -> List[Dict]:
    """Per (c, k): generalized-rate table before/after post-processing and per-group counterfactual ROC curves.

    The mixing policy is fit on the train split and evaluated on the test split.
    """
    if len(c_grid) == 0 or len(k_grid) == 0:
        raise ParameterError("c_grid and k_grid must not be empty")
    n_jobs = get_settings().n_jobs if n_jobs is None else n_jobs
    points = [(float(c), float(k)) for c in c_grid for k in k_grid]
    return Parallel(n_jobs=n_jobs)(
        delayed(_postprocess_point)(c, k, n, seed, threshold, randomize, config, clip_mode) for c, k in points
    )


def combined_table(results: List[Dict]) -> pd.DataFrame:
    if not results:
        return pd.DataFrame(columns=["c", "k"] + TABLE_COLUMNS)
    return pd.concat([r["table"] for r in results], ignore_index=True)
