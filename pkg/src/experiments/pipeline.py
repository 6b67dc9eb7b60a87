from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from src.data_generation.synthetic_data import GeneratorParams, OracleDataset, generate, train_test_split
from src.models.logistic_model import FitConfig, ScoreModel
from src.models.nuisance import NuisanceSet, attach_scores, fit_counterfactual, fit_observational, fit_propensity
from src.utils.logger import get_logger

logger = get_logger(__name__)

PIPELINE_CLIP_MODE = "winsorize"


@dataclass
class Experiment:
    """One generated population, split, with its three fitted models and test-row nuisances."""

    params: GeneratorParams
    dataset: OracleDataset
    train: OracleDataset
    test: OracleDataset
    train_idx: np.ndarray
    test_idx: np.ndarray
    models: Dict[str, ScoreModel]
    nuisances: NuisanceSet
    train_nuisances: NuisanceSet
    settings: Dict = field(default_factory=dict)

    @property
    def observational_scores(self) -> np.ndarray:
        return self.nuisances.obs_scores

    @property
    def counterfactual_scores(self) -> np.ndarray:
        return self.nuisances.cf_scores

    def split_record(self) -> Dict:
        return {"n_train": len(self.train_idx), "n_test": len(self.test_idx), **self.settings}


def fit_models(
    train: OracleDataset,
    include_treatment: bool = False,
    shift_correction: bool = False,
    config: Optional[FitConfig] = None,
    clip_mode: str = PIPELINE_CLIP_MODE,
) -> Dict[str, ScoreModel]:
    propensity = fit_propensity(train, config=config)
    models = {
        "observational": fit_observational(train, include_treatment=include_treatment, config=config),
        "propensity": propensity,
        "counterfactual": fit_counterfactual(
            train, shift_correction=shift_correction, config=config, propensity_model=propensity, clip_mode=clip_mode
        ),
    }
    for role, model in models.items():
        logger.info(
            f"Fitted {role} model in {model.diagnostics.get('iterations')} iterations "
            f"(gradient {model.diagnostics.get('gradient_max_norm', 0.0):.2e})"
        )
    return models


def prepare_experiment(
    params: GeneratorParams,
    test_fraction: float = 0.5,
    split_seed: Optional[int] = None,
    include_treatment: bool = False,
    shift_correction: bool = False,
    config: Optional[FitConfig] = None,
    clip_mode: str = PIPELINE_CLIP_MODE,
    n_jobs: Optional[int] = None,
) -> Experiment:
    """Generate, split, fit on the train rows and score the test rows."""
    dataset = generate(params, n_jobs=n_jobs)
    split_seed = params.seed if split_seed is None else split_seed
    train, test, train_idx, test_idx = train_test_split(dataset, test_fraction=test_fraction, seed=split_seed)
    models = fit_models(train, include_treatment, shift_correction, config, clip_mode)
    nuisances = attach_scores(test, models["propensity"], models["counterfactual"], models["observational"])
    train_nuisances = attach_scores(train, models["propensity"], models["counterfactual"], models["observational"])
    return Experiment(
        params=params,
        dataset=dataset,
        train=train,
        test=test,
        train_idx=train_idx,
        test_idx=test_idx,
        models=models,
        nuisances=nuisances,
        train_nuisances=train_nuisances,
        settings={
            "test_fraction": test_fraction,
            "split_seed": split_seed,
            "include_treatment": include_treatment,
            "shift_correction": shift_correction,
            "clip_mode": clip_mode,
        },
    )
