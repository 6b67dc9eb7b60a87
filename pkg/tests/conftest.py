import numpy as np
import pandas as pd
import pytest

from src.data_generation.synthetic_data import GeneratorParams, OracleDataset, generate
from src.experiments.pipeline import prepare_experiment
from src.models.nuisance import NuisanceSet

REFERENCE_SEED = 7
REFERENCE_N = 100_000


def make_dataset(z=None, a=None, t=None, y=None, y0=None, y1=None, params=None) -> OracleDataset:
    """Dataset from explicit columns; y defaults to the consistency rule when y0/y1 are given."""
    n = len(t)
    columns = {
        "z": np.zeros(n) if z is None else np.asarray(z, dtype=float),
        "a": np.zeros(n, dtype=int) if a is None else np.asarray(a, dtype=int),
    }
    t = np.asarray(t, dtype=int)
    if y0 is not None:
        columns["y0"] = np.asarray(y0, dtype=int)
    if y1 is not None:
        columns["y1"] = np.asarray(y1, dtype=int)
    columns["t"] = t
    if y is None:
        y = t * columns["y1"] + (1 - t) * columns["y0"]
    columns["y"] = np.asarray(y, dtype=int)
    return OracleDataset(frame=pd.DataFrame(columns), params=params)


def random_instance(rng: np.random.Generator, n: int = 12):
    """Small random dataset with random nuisances; both treatment arms present."""
    t = rng.integers(0, 2, n)
    t[0], t[1] = 0, 1
    y0 = rng.integers(0, 2, n)
    y1 = rng.integers(0, 2, n)
    dataset = make_dataset(z=rng.normal(size=n), a=rng.integers(0, 2, n), t=t, y0=y0, y1=y1)
    nuisances = NuisanceSet(propensity=rng.uniform(0.05, 0.9, n), cf_scores=rng.uniform(0.02, 0.98, n))
    return dataset, nuisances


@pytest.fixture
def hand_dataset() -> OracleDataset:
    # rows: (t, y0, y1) with y = t*y1 + (1-t)*y0
    return make_dataset(
        z=[-1.0, -0.5, 0.0, 0.5, 1.0, 1.5, -1.5, 2.0],
        a=[0, 0, 0, 0, 1, 1, 1, 1],
        t=[0, 0, 1, 1, 0, 1, 0, 1],
        y0=[1, 0, 1, 0, 1, 1, 0, 0],
        y1=[0, 0, 1, 0, 0, 0, 0, 1],
    )


@pytest.fixture
def hand_nuisances() -> NuisanceSet:
    return NuisanceSet(
        propensity=[0.2, 0.4, 0.5, 0.6, 0.3, 0.7, 0.1, 0.8],
        cf_scores=[0.7, 0.2, 0.6, 0.3, 0.5, 0.4, 0.1, 0.9],
    )


@pytest.fixture(scope="session")
def biased_params() -> GeneratorParams:
    return GeneratorParams(n=REFERENCE_N, c=0.1, k=1.6, seed=REFERENCE_SEED)


@pytest.fixture(scope="session")
def biased_dataset(biased_params) -> OracleDataset:
    return generate(biased_params, n_jobs=1)


@pytest.fixture(scope="session")
def biased_experiment(biased_params):
    return prepare_experiment(biased_params, n_jobs=1)


@pytest.fixture(scope="session")
def symmetric_experiment():
    return prepare_experiment(GeneratorParams(n=REFERENCE_N, c=0.1, k=0.0, seed=REFERENCE_SEED), n_jobs=1)
