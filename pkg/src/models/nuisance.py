from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
import pandas as pd

from src.data_generation.synthetic_data import GeneratorParams, OracleDataset
from src.models.logistic_model import FitConfig, ScoreModel, fit_logistic
from src.utils.helpers import AlignmentError, ParameterError, PositivityError
from src.utils.logger import get_logger

logger = get_logger(__name__)

FEATURES = ("z", "a")
TREATMENT_FEATURE = "t"

# CSV column names for the per-row nuisance estimates.
NUISANCE_COLUMNS = {"propensity": "pi_hat", "cf_scores": "s0_hat", "obs_scores": "obs_hat"}


@dataclass
class NuisanceSet:
    """Per-row propensity and outcome-model scores, aligned to a dataset's row order."""

    propensity: np.ndarray
    cf_scores: np.ndarray
    obs_scores: Optional[np.ndarray] = None
    provenance: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.propensity = np.asarray(self.propensity, dtype=float)
        self.cf_scores = np.asarray(self.cf_scores, dtype=float)
        if self.obs_scores is not None:
            self.obs_scores = np.asarray(self.obs_scores, dtype=float)
        n = len(self.propensity)
        for name in ("cf_scores", "obs_scores"):
            values = getattr(self, name)
            if values is not None and len(values) != n:
                raise AlignmentError(f"{name} has {len(values)} rows, propensity has {n}")

    def __len__(self) -> int:
        return len(self.propensity)

    def take(self, indices) -> "NuisanceSet":
        indices = np.asarray(indices)
        return NuisanceSet(
            propensity=self.propensity[indices],
            cf_scores=self.cf_scores[indices],
            obs_scores=None if self.obs_scores is None else self.obs_scores[indices],
            provenance=dict(self.provenance),
        )

    def to_columns(self) -> Dict[str, np.ndarray]:
        columns = {"pi_hat": self.propensity, "s0_hat": self.cf_scores}
        if self.obs_scores is not None:
            columns["obs_hat"] = self.obs_scores
        return columns

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "NuisanceSet":
        missing = [c for c in ("pi_hat", "s0_hat") if c not in frame.columns]
        if missing:
            raise AlignmentError(f"nuisance columns {missing} are missing")
        return cls(
            propensity=frame["pi_hat"].to_numpy(dtype=float),
            cf_scores=frame["s0_hat"].to_numpy(dtype=float),
            obs_scores=frame["obs_hat"].to_numpy(dtype=float) if "obs_hat" in frame.columns else None,
            provenance={"source": "file"},
        )


def check_aligned(dataset: OracleDataset, nuisances: NuisanceSet) -> None:
    if len(nuisances) != len(dataset):
        raise AlignmentError(f"nuisances cover {len(nuisances)} rows, dataset has {len(dataset)}")


def fit_observational(
    dataset: OracleDataset, include_treatment: bool = False, config: Optional[FitConfig] = None, weights=None
) -> ScoreModel:
    """Model of E[Y | X] on all rows (E[Y | X, T] when include_treatment is set)."""
    if len(dataset) == 0:
        raise ParameterError("cannot fit the observational model on an empty dataset")
    features = FEATURES + ((TREATMENT_FEATURE,) if include_treatment else ())
    model = fit_logistic(dataset.features(features), dataset.y, weights=weights, config=config, feature_names=features)
    model.diagnostics["role"] = "observational"
    return model


def fit_propensity(dataset: OracleDataset, config: Optional[FitConfig] = None) -> ScoreModel:
    """Model of P(T = 1 | X) on all rows."""
    t = dataset.t
    if len(dataset) == 0 or t.min() == t.max():
        raise ParameterError("the propensity model needs both treated and control rows")
    model = fit_logistic(dataset.features(FEATURES), t, config=config, feature_names=FEATURES)
    model.diagnostics["role"] = "propensity"
    return model


def fit_counterfactual(
    dataset: OracleDataset,
    shift_correction: bool = False,
    config: Optional[FitConfig] = None,
    propensity_model: Optional[ScoreModel] = None,
    clip: float = 0.01,
    clip_mode: str = "error",
) -> ScoreModel:
    """Model of E[Y0 | X], learned as E[Y | X, T = 0] on the control rows.

    With shift_correction the control rows are weighted by 1 / (1 - pi_hat(X))
    so the weighted control sample targets the full-population covariate law.
    """
    control = dataset.t == 0
    if not control.any():
        raise ParameterError("the control population (t = 0) is empty")
    controls = dataset.where(control)

    weights = None
    if shift_correction:
        if propensity_model is None:
            propensity_model = fit_propensity(dataset, config=config)
        pi_hat = propensity_model.predict_proba(controls.features(propensity_model.feature_spec))
        bound = 1.0 - clip
        over = np.flatnonzero(pi_hat > bound)
        if over.size:
            if clip_mode == "winsorize":
                logger.warning(f"Winsorized {over.size} control propensities at {bound}")
                pi_hat = np.minimum(pi_hat, bound)
            else:
                rows = np.flatnonzero(control)[over]
                raise PositivityError(f"{over.size} control rows have propensity above {bound}", rows=rows)
        weights = 1.0 / (1.0 - pi_hat)

    model = fit_logistic(
        controls.features(FEATURES), controls.y, weights=weights, config=config, feature_names=FEATURES
    )
    model.diagnostics["role"] = "counterfactual"
    model.diagnostics["shift_correction"] = shift_correction
    return model


def _model_scores(dataset: OracleDataset, model: ScoreModel, role: str, allow_treatment: bool) -> np.ndarray:
    if TREATMENT_FEATURE in model.feature_spec and not allow_treatment:
        raise AlignmentError(f"the {role} model must not use the treatment as a feature")
    return model.predict_proba(dataset.features(model.feature_spec))


def attach_scores(
    dataset: OracleDataset,
    propensity_model: ScoreModel,
    counterfactual_model: ScoreModel,
    observational_model: Optional[ScoreModel] = None,
) -> NuisanceSet:
    """Score every row of `dataset` with each model, keeping row order."""
    provenance = {
        "propensity": propensity_model.diagnostics.get("kind", "fitted"),
        "cf_scores": counterfactual_model.diagnostics.get("kind", "fitted"),
    }
    obs_scores = None
    if observational_model is not None:
        obs_scores = _model_scores(dataset, observational_model, "observational", allow_treatment=True)
        provenance["obs_scores"] = observational_model.diagnostics.get("kind", "fitted")
    return NuisanceSet(
        propensity=_model_scores(dataset, propensity_model, "propensity", allow_treatment=False),
        cf_scores=_model_scores(dataset, counterfactual_model, "counterfactual", allow_treatment=False),
        obs_scores=obs_scores,
        provenance=provenance,
    )


def oracle_models(params: GeneratorParams) -> Dict[str, ScoreModel]:
    """The generator's own propensity and baseline-risk laws as score models."""
    propensity = ScoreModel(
        feature_spec=FEATURES,
        coefficients=np.array([1.0, params.k]),
        intercept=params.offset,
        diagnostics={"kind": "oracle", "role": "propensity"},
    )
    counterfactual = ScoreModel(
        feature_spec=FEATURES,
        coefficients=np.array([1.0, 0.0]),
        intercept=params.offset,
        diagnostics={"kind": "oracle", "role": "counterfactual"},
    )
    return {"propensity": propensity, "counterfactual": counterfactual}


def oracle_nuisances(dataset: OracleDataset) -> NuisanceSet:
    """Nuisances computed from the analytic generator probabilities.

    The observational column is E[Y | X] = pi(X) * c * s0(X) + (1 - pi(X)) * s0(X).
    """
    if dataset.params is None:
        raise ParameterError("oracle nuisances need the generator parameters of the dataset")
    models = oracle_models(dataset.params)
    nuisances = attach_scores(dataset, models["propensity"], models["counterfactual"])
    pi, s0 = nuisances.propensity, nuisances.cf_scores
    nuisances.obs_scores = pi * dataset.params.c * s0 + (1.0 - pi) * s0
    nuisances.provenance["obs_scores"] = "oracle"
    return nuisances
