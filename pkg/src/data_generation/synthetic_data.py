import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel, Field
from sklearn.model_selection import train_test_split as sk_train_test_split

import src
from src.utils.config import get_settings
from src.utils.helpers import (
    AlignmentError,
    DataFormatError,
    ParameterError,
    read_json,
    read_numeric_csv,
    sigmoid,
    write_json,
)
from src.utils.logger import get_logger

logger = get_logger(__name__)

COLUMNS = ("z", "a", "y0", "y1", "t", "y")
OBSERVED_COLUMNS = ("z", "a", "t", "y")
ORACLE_COLUMNS = ("y0", "y1")
INDICATOR_COLUMNS = ("a", "y0", "y1", "t", "y")

# Rows per seeded block; fixed so the output does not depend on n_jobs.
BLOCK_SIZE = 65_536


class GeneratorParams(BaseModel):
    n: int = Field(default=100_000, ge=1)
    c: float = Field(default=0.1, ge=0.0, le=1.0)
    k: float = Field(default=1.6, ge=0.0)
    offset: float = -0.5
    seed: int = Field(default=0, ge=0, lt=2**64)


@dataclass
class OracleDataset:
    """Rows of (z, a, y0, y1, t, y).

    y0/y1 are the potential outcomes; they are absent when the data only
    carries what was observed. Row order is meaningful: every per-row vector
    produced downstream is aligned to it.
    """

    frame: pd.DataFrame
    params: Optional[GeneratorParams] = None
    metadata: Dict = field(default_factory=dict)

    def __post_init__(self):
        missing = [c for c in OBSERVED_COLUMNS if c not in self.frame.columns]
        if missing:
            raise AlignmentError(f"dataset is missing columns {missing}")
        for column in INDICATOR_COLUMNS:
            if column in self.frame.columns and not self.frame[column].isin((0, 1)).all():
                raise ParameterError(f"column {column!r} must only contain 0/1 values")

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def has_oracle(self) -> bool:
        return all(c in self.frame.columns for c in ORACLE_COLUMNS)

    def column(self, name: str) -> np.ndarray:
        if name not in self.frame.columns:
            raise AlignmentError(f"dataset has no column {name!r}")
        return self.frame[name].to_numpy()

    @property
    def z(self) -> np.ndarray:
        return self.column("z").astype(float)

    @property
    def a(self) -> np.ndarray:
        return self.column("a").astype(int)

    @property
    def t(self) -> np.ndarray:
        return self.column("t").astype(int)

    @property
    def y(self) -> np.ndarray:
        return self.column("y").astype(int)

    @property
    def y0(self) -> np.ndarray:
        return self.column("y0").astype(int)

    @property
    def y1(self) -> np.ndarray:
        return self.column("y1").astype(int)

    def features(self, feature_spec: Sequence[str]) -> np.ndarray:
        missing = [f for f in feature_spec if f not in self.frame.columns]
        if missing:
            raise AlignmentError(f"features {missing} are not dataset columns")
        return self.frame[list(feature_spec)].to_numpy(dtype=float)

    def take(self, indices) -> "OracleDataset":
        """Rows at `indices`, in that order."""
        frame = self.frame.iloc[np.asarray(indices)].reset_index(drop=True)
        return OracleDataset(frame=frame, params=self.params, metadata=dict(self.metadata))

    def where(self, mask) -> "OracleDataset":
        return self.take(np.flatnonzero(np.asarray(mask, dtype=bool)))

    def to_csv(self, filepath, extra_columns: Optional[Dict[str, np.ndarray]] = None) -> Path:
        """Write the CSV plus a sidecar JSON metadata record next to it."""
        filepath = Path(filepath)
        filepath.parent.mkdir(parents=True, exist_ok=True)
        columns = [c for c in COLUMNS if c in self.frame.columns]
        out = self.frame[columns].copy()
        for name, values in (extra_columns or {}).items():
            if len(values) != len(out):
                raise AlignmentError(f"column {name!r} has {len(values)} rows, dataset has {len(out)}")
            out[name] = values
        out.to_csv(filepath, index=False, float_format="%.17g")
        write_json(self.sidecar(), sidecar_path(filepath))
        logger.info(f"Saved {len(out)} rows to {filepath}")
        return filepath

    def sidecar(self) -> Dict:
        record = {"tool_version": src.__version__, "n_rows": len(self)}
        if self.params is not None:
            record["params"] = self.params.model_dump()
            record["seed"] = self.params.seed
        record.update(self.metadata)
        return record

    @classmethod
    def from_csv(cls, filepath) -> Tuple["OracleDataset", pd.DataFrame]:
        """Load a dataset; returns it together with any extra (non-dataset) columns."""
        filepath = Path(filepath)
        df = read_numeric_csv(filepath, required=OBSERVED_COLUMNS)
        for column in INDICATOR_COLUMNS:
            if column in df.columns:
                bad = ~df[column].isin((0, 1))
                if bad.any():
                    row = int(np.flatnonzero(bad.to_numpy())[0])
                    raise DataFormatError(
                        f"indicator value {df[column].iloc[row]!r} is not 0/1", str(filepath), line=row + 2, column=column
                    )
                df[column] = df[column].astype(int)

        params = None
        metadata = {}
        side = sidecar_path(filepath)
        if side.exists():
            metadata = read_json(side)
            if "params" in metadata:
                params = GeneratorParams(**metadata.pop("params"))
        dataset_columns = [c for c in COLUMNS if c in df.columns]
        extra = df[[c for c in df.columns if c not in dataset_columns]]
        return cls(frame=df[dataset_columns].copy(), params=params, metadata=metadata), extra


@dataclass(frozen=True)
class MomentSummary:
    mean_y: float
    mean_y0: float
    mean_y1: float
    mean_t: float
    mean_t_given_a0: float
    mean_t_given_a1: float
    missing: Tuple[str, ...] = ()

    def to_dict(self) -> Dict:
        return {
            "mean_y": self.mean_y,
            "mean_y0": self.mean_y0,
            "mean_y1": self.mean_y1,
            "mean_t": self.mean_t,
            "mean_t_given_a0": self.mean_t_given_a0,
            "mean_t_given_a1": self.mean_t_given_a1,
            "missing": list(self.missing),
        }


def sidecar_path(filepath) -> Path:
    filepath = Path(filepath)
    return filepath.with_suffix(".json")


def _generate_block(params: GeneratorParams, block: int, size: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=params.seed, spawn_key=(block,)))
    # per block: every Z first, then one uniform row per unit with columns A, Y0, Y1, T
    z = rng.standard_normal(size)
    u = rng.random((size, 4))
    base = sigmoid(z + params.offset)
    a = (u[:, 0] < 0.5).astype(int)
    y0 = (u[:, 1] < base).astype(int)
    y1 = (u[:, 2] < params.c * base).astype(int)
    t = (u[:, 3] < sigmoid(z + params.offset + params.k * a)).astype(int)
    y = t * y1 + (1 - t) * y0
    return np.column_stack([z, a, y0, y1, t, y])


def generate(params: GeneratorParams, n_jobs: Optional[int] = None) -> OracleDataset:
    """Sample the synthetic potential-outcomes population.

    Z ~ N(0, 1), A ~ Bern(0.5), Y0 ~ Bern(sigmoid(Z + offset)),
    Y1 ~ Bern(c * sigmoid(Z + offset)), T ~ Bern(sigmoid(Z + offset + k * A))
    and Y = T * Y1 + (1 - T) * Y0.
    """
    if not isinstance(params, GeneratorParams):
        raise ParameterError("generate expects a GeneratorParams record")
    n_jobs = get_settings().n_jobs if n_jobs is None else n_jobs

    n_blocks = math.ceil(params.n / BLOCK_SIZE)
    sizes = [min(BLOCK_SIZE, params.n - b * BLOCK_SIZE) for b in range(n_blocks)]
    blocks = Parallel(n_jobs=n_jobs)(delayed(_generate_block)(params, b, size) for b, size in enumerate(sizes))

    data = np.vstack(blocks)
    frame = pd.DataFrame(data, columns=list(COLUMNS))
    for column in INDICATOR_COLUMNS:
        frame[column] = frame[column].astype(int)

    logger.info(f"Generated {params.n} rows (c={params.c}, k={params.k}, seed={params.seed})")
    return OracleDataset(frame=frame, params=params)


def _mean_or_nan(values: np.ndarray) -> float:
    return float(values.mean()) if values.size else float("nan")


def summarize(dataset: OracleDataset) -> MomentSummary:
    """Sample moments of the outcome and treatment columns."""
    if len(dataset) == 0:
        raise ParameterError("cannot summarize an empty dataset")
    a, t = dataset.a, dataset.t
    missing: List[str] = []

    def conditional(group: int, name: str) -> float:
        value = _mean_or_nan(t[a == group])
        if math.isnan(value):
            missing.append(name)
            logger.warning(f"group a={group} is empty; {name} is missing")
        return value

    mean_t_a0 = conditional(0, "mean_t_given_a0")
    mean_t_a1 = conditional(1, "mean_t_given_a1")

    if dataset.has_oracle:
        mean_y0, mean_y1 = float(dataset.y0.mean()), float(dataset.y1.mean())
    else:
        mean_y0 = mean_y1 = float("nan")
        missing.extend(["mean_y0", "mean_y1"])

    return MomentSummary(
        mean_y=float(dataset.y.mean()),
        mean_y0=mean_y0,
        mean_y1=mean_y1,
        mean_t=float(t.mean()),
        mean_t_given_a0=mean_t_a0,
        mean_t_given_a1=mean_t_a1,
        missing=tuple(missing),
    )


def train_test_split(dataset: OracleDataset, test_fraction: float = 0.5, seed: int = 0):
    """Seeded shuffle split; returns (train, test, train_indices, test_indices)."""
    if not 0.0 < test_fraction < 1.0:
        raise ParameterError("test_fraction must lie strictly between 0 and 1")
    if len(dataset) < 2:
        raise ParameterError("need at least two rows to split")
    indices = np.arange(len(dataset))
    train_idx, test_idx = sk_train_test_split(indices, test_size=test_fraction, random_state=seed % 2**32, shuffle=True)
    train_idx, test_idx = np.sort(train_idx), np.sort(test_idx)
    return dataset.take(train_idx), dataset.take(test_idx), train_idx, test_idx
