import json
import re
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Type, TypeVar

import numpy as np
import pandas as pd
from pydantic import BaseModel, ValidationError
from scipy.special import expit, logit

import src

Z_95 = 1.96

ModelT = TypeVar("ModelT", bound=BaseModel)


class CFEvalError(Exception):
    """Base class for every error the package raises on purpose."""

    def details(self) -> Dict[str, Any]:
        return {}

    def to_record(self) -> Dict[str, Any]:
        return {"error": type(self).__name__, "message": str(self), "details": self.details()}


class ParameterError(CFEvalError, ValueError):
    """A parameter or precondition is violated."""


class AlignmentError(CFEvalError, ValueError):
    """Vectors, features or rows do not line up."""


class ConvergenceError(CFEvalError, RuntimeError):
    def __init__(self, message: str, gradient_norm: float, iterations: int):
        super().__init__(message)
        self.gradient_norm = gradient_norm
        self.iterations = iterations

    def details(self) -> Dict[str, Any]:
        return {"gradient_norm": self.gradient_norm, "iterations": self.iterations}


class SeparationError(CFEvalError, RuntimeError):
    """Likelihood has no finite maximizer (degenerate labels or separable data)."""


class PositivityError(CFEvalError, ValueError):
    def __init__(self, message: str, rows: Sequence[int]):
        super().__init__(message)
        self.rows = [int(r) for r in rows]

    def details(self) -> Dict[str, Any]:
        return {"rows": self.rows[:50], "n_rows": len(self.rows)}


class UndefinedMetricError(CFEvalError, ValueError):
    """Metric has an empty or non-positive denominator."""


class DataFormatError(CFEvalError, ValueError):
    def __init__(self, message: str, file: str, line: Optional[int] = None, column: Optional[str] = None):
        where = f"{file}"
        if line is not None:
            where += f":{line}"
        if column is not None:
            where += f" (column {column!r})"
        super().__init__(f"{where}: {message}")
        self.file = file
        self.line = line
        self.column = column

    def details(self) -> Dict[str, Any]:
        return {"file": self.file, "line": self.line, "column": self.column}


def build(model_cls: Type[ModelT], **values) -> ModelT:
    """Construct a pydantic record, turning validation failures into ParameterError."""
    try:
        return model_cls(**values)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or model_cls.__name__}: {err['msg']}" for err in e.errors()
        )
        raise ParameterError(f"invalid {model_cls.__name__}: {problems}") from e


def sigmoid(x):
    return expit(x)


def log_odds(p):
    return logit(p)


def substream(seed: int, index: int) -> np.random.Generator:
    """Independent generator for a named sub-task of a seeded run."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))


def as_binary(values, name: str) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 1:
        raise AlignmentError(f"{name} must be one-dimensional")
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise ParameterError(f"{name} must only contain 0/1 values")
    return arr.astype(int)


def check_length(n: int, **arrays) -> None:
    for name, arr in arrays.items():
        if arr is not None and len(arr) != n:
            raise AlignmentError(f"{name} has length {len(arr)}, expected {n}")


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, BaseModel):
        return to_jsonable(obj.model_dump())
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        return None if np.isnan(value) else value
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(data, filepath) -> Path:
    filepath = Path(filepath)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    with open(filepath, "w") as f:
        json.dump(to_jsonable(data), f, indent=2, sort_keys=True)
    return filepath


def read_json(filepath) -> dict:
    filepath = Path(filepath)
    try:
        with open(filepath) as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise DataFormatError("file does not exist", str(filepath)) from e
    except json.JSONDecodeError as e:
        raise DataFormatError(e.msg, str(filepath), line=e.lineno, column=str(e.colno)) from e


def write_manifest(out_dir, command: str, config: dict, seed: Optional[int], extra: Optional[dict] = None) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "tool_version": src.__version__,
        "created_at": datetime.now(timezone.utc).isoformat(),
    }
    if extra:
        manifest.update(extra)
    return write_json(manifest, Path(out_dir) / "manifest.json")


_LINE_RE = re.compile(r"line (\d+)")


def read_numeric_csv(filepath, required: Sequence[str] = ()) -> pd.DataFrame:
    """Read a CSV of numeric columns, reporting the first bad cell by line and column."""
    filepath = Path(filepath)
    if not filepath.exists():
        raise DataFormatError("file does not exist", str(filepath))
    try:
        df = pd.read_csv(filepath)
    except pd.errors.EmptyDataError as e:
        raise DataFormatError("file is empty", str(filepath), line=1) from e
    except pd.errors.ParserError as e:
        match = _LINE_RE.search(str(e))
        line = int(match.group(1)) if match else None
        raise DataFormatError(str(e).strip(), str(filepath), line=line) from e

    missing = [c for c in required if c not in df.columns]
    if missing:
        raise DataFormatError(f"missing required columns {missing}", str(filepath), line=1)

    for column in df.columns:
        converted = pd.to_numeric(df[column], errors="coerce")
        bad = converted.isna() & df[column].notna()
        if df[column].isna().any():
            bad = bad | df[column].isna()
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise DataFormatError(
                f"non-numeric value {df[column].iloc[row]!r}", str(filepath), line=row + 2, column=column
            )
        df[column] = converted
    return df
