import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field

from src.utils.helpers import (
    AlignmentError,
    ConvergenceError,
    DataFormatError,
    ParameterError,
    SeparationError,
    log_odds,
    sigmoid,
    write_json,
)
from src.utils.logger import get_logger

logger = get_logger(__name__)

# Mean negative log-likelihood this close to zero means the classes are separable.
_SEPARATION_NLL = 1e-8
_MAX_STEP_HALVINGS = 40


class FitConfig(BaseModel):
    max_iterations: int = Field(default=100, ge=1)
    gradient_tolerance: float = Field(default=1e-8, gt=0.0)
    l2_penalty: float = Field(default=0.0, ge=0.0)


@dataclass(frozen=True, eq=False)
class ScoreModel:
    """Logistic probability model over a named, ordered feature list."""

    feature_spec: tuple
    coefficients: np.ndarray
    intercept: float
    diagnostics: Dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        coefficients = np.asarray(self.coefficients, dtype=float).reshape(-1)
        if coefficients.shape[0] != len(self.feature_spec):
            raise AlignmentError(
                f"{coefficients.shape[0]} coefficients for {len(self.feature_spec)} features {self.feature_spec}"
            )
        coefficients.setflags(write=False)
        object.__setattr__(self, "feature_spec", tuple(self.feature_spec))
        object.__setattr__(self, "coefficients", coefficients)
        object.__setattr__(self, "intercept", float(self.intercept))

    def linear_predictor(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=float)
        if features.ndim == 1:
            features = features.reshape(1, -1)
        if features.shape[1] != len(self.feature_spec):
            raise AlignmentError(
                f"expected {len(self.feature_spec)} features {self.feature_spec}, got {features.shape[1]}"
            )
        return features @ self.coefficients + self.intercept

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        """Scores for a feature matrix whose columns follow feature_spec."""
        return sigmoid(self.linear_predictor(features))

    def to_dict(self) -> Dict:
        return {
            "feature_spec": list(self.feature_spec),
            "coefficients": self.coefficients.tolist(),
            "intercept": self.intercept,
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, record: Dict) -> "ScoreModel":
        try:
            return cls(
                feature_spec=tuple(record["feature_spec"]),
                coefficients=np.asarray(record["coefficients"], dtype=float),
                intercept=float(record["intercept"]),
                diagnostics=dict(record.get("diagnostics", {})),
            )
        except KeyError as e:
            raise ParameterError(f"model record is missing {e}") from e

    def save(self, filepath) -> Path:
        path = write_json(self.to_dict(), filepath)
        logger.info(f"Model saved to {path}")
        return path

    @classmethod
    def load(cls, filepath) -> "ScoreModel":
        filepath = Path(filepath)
        try:
            with open(filepath) as f:
                record = json.load(f)
        except FileNotFoundError as e:
            raise DataFormatError("model file does not exist", str(filepath)) from e
        except json.JSONDecodeError as e:
            raise DataFormatError(e.msg, str(filepath), line=e.lineno, column=str(e.colno)) from e
        return cls.from_dict(record)


def constant_model(probability: float, feature_spec: Sequence[str]) -> ScoreModel:
    """A model that ignores its features and always returns `probability`."""
    if not 0.0 < probability < 1.0:
        raise ParameterError("a constant model needs a probability strictly inside (0, 1)")
    return ScoreModel(
        feature_spec=tuple(feature_spec),
        coefficients=np.zeros(len(feature_spec)),
        intercept=float(log_odds(probability)),
        diagnostics={"kind": "constant", "probability": probability},
    )


def _objective(design, labels, weights, total, beta, penalty):
    eta = design @ beta
    nll = np.sum(weights * (np.logaddexp(0.0, eta) - labels * eta)) / total
    return nll + 0.5 * penalty * np.sum(beta[1:] ** 2), nll


def fit_logistic(
    features,
    labels,
    weights=None,
    config: Optional[FitConfig] = None,
    feature_names: Optional[Sequence[str]] = None,
) -> ScoreModel:
    """Fit a (weighted, optionally L2-penalized) logistic regression by Newton's method.

    The objective is the weighted mean negative log-likelihood plus
    (l2_penalty / 2) * ||coefficients||^2; the intercept is never penalized.
    Iteration stops once the max-norm of the gradient is within
    config.gradient_tolerance.
    """
    config = config or FitConfig()
    X = np.asarray(features, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    y = np.asarray(labels, dtype=float).reshape(-1)
    n, d = X.shape
    if y.shape[0] != n:
        raise AlignmentError(f"{n} feature rows but {y.shape[0]} labels")
    if n == 0:
        raise ParameterError("cannot fit on zero rows")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ParameterError("labels must be 0/1")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    if w.shape[0] != n:
        raise AlignmentError(f"{n} feature rows but {w.shape[0]} weights")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ParameterError("weights must be finite and nonnegative")
    if not np.all(np.isfinite(X)):
        raise ParameterError("features must be finite")

    names = tuple(feature_names) if feature_names is not None else tuple(f"x{j}" for j in range(d))
    if len(names) != d:
        raise AlignmentError(f"{len(names)} feature names for {d} feature columns")

    positive = w[y == 1].sum()
    negative = w[y == 0].sum()
    if positive <= 0 or negative <= 0:
        raise SeparationError(
            "labels have a single class with positive weight; the likelihood has no finite maximizer "
            "(use l2_penalty > 0 and data with both classes)"
        )
    total = w.sum()
    penalty = config.l2_penalty

    design = np.hstack([np.ones((n, 1)), X])
    beta = np.zeros(d + 1)
    beta[0] = log_odds(positive / total)
    ridge = np.full(d + 1, penalty)
    ridge[0] = 0.0

    objective, nll = _objective(design, y, w, total, beta, penalty)
    grad_norm = np.inf
    for iteration in range(config.max_iterations + 1):
        p = sigmoid(design @ beta)
        grad = design.T @ (w * (p - y)) / total + ridge * beta
        grad_norm = float(np.max(np.abs(grad)))
        if penalty == 0 and (nll < _SEPARATION_NLL or np.max(np.abs(beta)) > 1e6):
            raise SeparationError(
                "data are (quasi-)completely separated; coefficients diverge. Refit with l2_penalty > 0"
            )
        if grad_norm <= config.gradient_tolerance:
            break
        if iteration == config.max_iterations:
            raise ConvergenceError(
                f"logistic fit did not converge in {config.max_iterations} iterations "
                f"(gradient max-norm {grad_norm:.3e})",
                gradient_norm=grad_norm,
                iterations=iteration,
            )

        curvature = w * p * (1.0 - p) / total
        hessian = design.T @ (design * curvature[:, None]) + np.diag(ridge)
        try:
            step = np.linalg.solve(hessian, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hessian, grad, rcond=None)[0]

        scale = 1.0
        for _ in range(_MAX_STEP_HALVINGS):
            candidate = beta - scale * step
            new_objective, new_nll = _objective(design, y, w, total, candidate, penalty)
            if new_objective <= objective + 1e-15 * max(1.0, abs(objective)):
                break
            scale *= 0.5
        beta, objective, nll = candidate, new_objective, new_nll

    if not np.all(np.isfinite(beta)):
        raise SeparationError("coefficients are not finite; refit with l2_penalty > 0")

    diagnostics = {
        "iterations": iteration,
        "gradient_max_norm": grad_norm,
        "mean_neg_log_likelihood": float(nll),
        "n_rows": int(n),
        "total_weight": float(total),
        "l2_penalty": penalty,
    }
    logger.info(f"Fitted logistic model on {n} rows in {iteration} iterations (gradient {grad_norm:.2e})")
    return ScoreModel(feature_spec=names, coefficients=beta[1:], intercept=beta[0], diagnostics=diagnostics)


def score(model: ScoreModel, features) -> float:
    """Probability for a single feature vector."""
    features = np.asarray(features, dtype=float)
    if features.ndim != 1:
        raise AlignmentError("score expects a single feature vector")
    return float(model.predict_proba(features)[0])


def threshold_labels(scores, threshold: float) -> np.ndarray:
    """1 where score >= threshold, else 0."""
    if not 0.0 <= threshold <= 1.0:
        raise ParameterError(f"threshold must lie in [0, 1], got {threshold}")
    return (np.asarray(scores, dtype=float) >= threshold).astype(int)
