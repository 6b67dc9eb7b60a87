"""Empirical balance and independence conditions on oracle data.

Each balance residual is lhs - rhs of a condition that, given the matching
observational parity, holds exactly when the counterfactual parity holds.
Both potential outcomes are needed, so only oracle datasets are accepted.
"""

import math
from dataclasses import dataclass, field
from itertools import product
from typing import Dict, List, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed

from src.data_generation.synthetic_data import OracleDataset
from src.utils.config import get_settings
from src.utils.helpers import ParameterError, as_binary, substream
from src.utils.logger import get_logger

logger = get_logger(__name__)

CONDITIONS = ("balBP", "balPP", "balEO")
N_BOOTSTRAP = 200
SIGNIFICANCE = 3.0


class _EmptyStratum(Exception):
    pass


@dataclass
class BalanceResidual:
    condition: str
    y: int
    group: int
    y_hat: Optional[int]
    lhs: float
    rhs: float
    stderr: float
    n_bootstrap: int
    inestimable: bool = False
    reason: str = ""
    assumptions: Dict[str, bool] = field(default_factory=dict)

    @property
    def residual(self) -> float:
        return self.lhs - self.rhs

    @property
    def significant(self) -> bool:
        """True when |residual| exceeds three bootstrap standard errors."""
        if self.inestimable or not math.isfinite(self.stderr):
            return False
        return abs(self.residual) > SIGNIFICANCE * self.stderr

    def to_dict(self) -> Dict:
        return {
            "condition": self.condition,
            "y": self.y,
            "group": self.group,
            "y_hat": self.y_hat,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "residual": self.residual,
            "stderr": self.stderr,
            "n_bootstrap": self.n_bootstrap,
            "significant": self.significant,
            "inestimable": self.inestimable,
            "reason": self.reason,
            "assumptions": dict(self.assumptions),
        }


def _prob(event: np.ndarray, given: np.ndarray, label: str) -> float:
    n = np.count_nonzero(given)
    if n == 0:
        raise _EmptyStratum(f"no rows with {label}")
    return np.count_nonzero(event & given) / n


def _oracle_columns(dataset: OracleDataset) -> Dict[str, np.ndarray]:
    if not dataset.has_oracle:
        raise ParameterError("balance conditions need the oracle columns y0 and y1")
    return {name: dataset.column(name).astype(bool) for name in ("a", "y0", "y1", "t", "y")}


def _bp_terms(cols, stratum: np.ndarray, y: int, group: int) -> Tuple[float, float]:
    in_a = stratum & (cols["a"] == bool(group))
    y1_is = cols["y1"] == bool(y)
    y0_is = cols["y0"] == bool(y)
    t = cols["t"]
    lhs = _prob(y1_is, stratum, "the stratum") * _prob(t, stratum & y1_is, f"y1={y}") - _prob(
        y1_is, in_a, f"a={group}"
    ) * _prob(t, in_a & y1_is, f"y1={y}, a={group}")
    rhs = _prob(y0_is, stratum, "the stratum") * (
        _prob(t, stratum & y0_is, f"y0={y}") - _prob(t, in_a & y0_is, f"y0={y}, a={group}")
    )
    return lhs, rhs


def _ratio(num: float, den: float, label: str) -> float:
    if den == 0:
        raise _EmptyStratum(f"P({label}) = 0")
    return num / den


def _eo_terms(cols, stratum: np.ndarray, y: int, group: int) -> Tuple[float, float]:
    # stratum is the predicted-positive mask
    everyone = np.ones_like(stratum)
    in_a = cols["a"] == bool(group)
    y1_is = cols["y1"] == bool(y)
    y0_is = cols["y0"] == bool(y)
    y_is = cols["y"] == bool(y)
    t = cols["t"]
    untreated = ~t

    p_y = _prob(y_is, everyone, "everyone")
    p_y_a = _prob(y_is, in_a, f"a={group}")
    treated_term = _prob(stratum, y1_is, f"y1={y}") * _ratio(
        _prob(t, stratum & y1_is, f"y_hat=1, y1={y}") * _prob(y1_is, everyone, "everyone"), p_y, f"Y={y}"
    )
    treated_term_a = _prob(stratum, y1_is & in_a, f"y1={y}, a={group}") * _ratio(
        _prob(t, stratum & y1_is & in_a, f"y_hat=1, y1={y}, a={group}") * _prob(y1_is, in_a, f"a={group}"),
        p_y_a,
        f"Y={y} | a={group}",
    )
    control_a = _ratio(
        _prob(untreated, stratum & y0_is & in_a, f"y_hat=1, y0={y}, a={group}") * _prob(y0_is, in_a, f"a={group}"),
        p_y_a,
        f"Y={y} | a={group}",
    )
    control = _ratio(
        _prob(untreated, stratum & y0_is, f"y_hat=1, y0={y}") * _prob(y0_is, everyone, "everyone"), p_y, f"Y={y}"
    )
    lhs = treated_term - treated_term_a
    rhs = _prob(stratum, y0_is, f"y0={y}") * (control_a - control)
    return lhs, rhs


_TERMS = {"balBP": _bp_terms, "balPP": _bp_terms, "balEO": _eo_terms}


def _resample_residual(condition, cols, stratum, y, group, seed, index) -> float:
    rng = substream(seed, index)
    idx = rng.integers(0, len(stratum), size=len(stratum))
    resampled = {name: values[idx] for name, values in cols.items()}
    try:
        lhs, rhs = _TERMS[condition](resampled, stratum[idx], y, group)
    except _EmptyStratum:
        return float("nan")
    return lhs - rhs


def _evaluate(
    condition: str,
    cols: Dict[str, np.ndarray],
    stratum: np.ndarray,
    y: int,
    group: int,
    y_hat: Optional[int],
    assumptions: Dict[str, bool],
    n_bootstrap: int,
    seed: int,
    n_jobs: Optional[int],
) -> BalanceResidual:
    if y not in (0, 1) or group not in (0, 1):
        raise ParameterError(f"y and group must be 0 or 1, got y={y}, group={group}")
    if n_bootstrap < 2:
        raise ParameterError(f"n_bootstrap must be at least 2, got {n_bootstrap}")
    broken = [name for name, ok in assumptions.items() if not ok]
    if broken:
        logger.warning(f"{condition} (y={y}, a={group}): assumption violated: {', '.join(broken)}")

    try:
        lhs, rhs = _TERMS[condition](cols, stratum, y, group)
    except _EmptyStratum as exc:
        logger.info(f"{condition} (y={y}, a={group}) inestimable: {exc}")
        return BalanceResidual(
            condition, y, group, y_hat, float("nan"), float("nan"), float("nan"), 0, True, str(exc), assumptions
        )

    n_jobs = get_settings().n_jobs if n_jobs is None else n_jobs
    draws = np.asarray(
        Parallel(n_jobs=n_jobs)(
            delayed(_resample_residual)(condition, cols, stratum, y, group, seed, b) for b in range(n_bootstrap)
        )
    )
    finite = draws[np.isfinite(draws)]
    stderr = float(np.std(finite, ddof=1)) if len(finite) >= 2 else float("nan")
    if len(finite) < n_bootstrap:
        logger.debug(f"{condition}: {n_bootstrap - len(finite)} of {n_bootstrap} resamples had an empty stratum")
    return BalanceResidual(condition, y, group, y_hat, float(lhs), float(rhs), stderr, len(finite), False, "", assumptions)


def _untreated_possible(cols, stratum, y: int, group: int) -> bool:
    given = stratum & (cols["y0"] == bool(y)) & (cols["a"] == bool(group))
    return bool(np.any(~cols["t"][given]))


def balance_bp(
    dataset: OracleDataset,
    group: int = 1,
    y: int = 1,
    n_bootstrap: int = N_BOOTSTRAP,
    seed: int = 0,
    n_jobs: Optional[int] = None,
) -> BalanceResidual:
    cols = _oracle_columns(dataset)
    stratum = np.ones(len(dataset), dtype=bool)
    assumptions = {"P(T=0 | y0, a) > 0": _untreated_possible(cols, stratum, y, group)}
    return _evaluate("balBP", cols, stratum, y, group, None, assumptions, n_bootstrap, seed, n_jobs)


def balance_pp(
    dataset: OracleDataset,
    predicted_labels,
    group: int = 1,
    y_hat: int = 1,
    y: int = 1,
    n_bootstrap: int = N_BOOTSTRAP,
    seed: int = 0,
    n_jobs: Optional[int] = None,
) -> BalanceResidual:
    """balBP evaluated within the stratum of rows predicted y_hat."""
    cols = _oracle_columns(dataset)
    labels = as_binary(predicted_labels, "predicted_labels")
    if len(labels) != len(dataset):
        raise ParameterError(f"{len(labels)} labels for {len(dataset)} rows")
    stratum = labels == y_hat
    assumptions = {"P(T=0 | y0, a, y_hat) > 0": _untreated_possible(cols, stratum, y, group)}
    return _evaluate("balPP", cols, stratum, y, group, y_hat, assumptions, n_bootstrap, seed, n_jobs)


def balance_eo(
    dataset: OracleDataset,
    predicted_labels,
    group: int = 1,
    y: int = 1,
    n_bootstrap: int = N_BOOTSTRAP,
    seed: int = 0,
    n_jobs: Optional[int] = None,
) -> BalanceResidual:
    cols = _oracle_columns(dataset)
    labels = as_binary(predicted_labels, "predicted_labels")
    if len(labels) != len(dataset):
        raise ParameterError(f"{len(labels)} labels for {len(dataset)} rows")
    stratum = labels == 1
    in_a = cols["a"] == bool(group)
    assumptions = {
        "P(Y=y | a) > 0": bool(np.any(cols["y"][in_a] == bool(y))),
        "P(T=0 | y0, a, y_hat) > 0": _untreated_possible(cols, stratum, y, group),
    }
    return _evaluate("balEO", cols, stratum, y, group, 1, assumptions, n_bootstrap, seed, n_jobs)


def balance_residuals(
    dataset: OracleDataset,
    predicted_labels=None,
    group: int = 1,
    n_bootstrap: int = N_BOOTSTRAP,
    seed: int = 0,
    n_jobs: Optional[int] = None,
) -> List[BalanceResidual]:
    """All applicable conditions for y in (1, 0)."""
    results = []
    for y in (1, 0):
        results.append(balance_bp(dataset, group, y, n_bootstrap, seed, n_jobs))
        if predicted_labels is not None:
            for y_hat in (1, 0):
                results.append(balance_pp(dataset, predicted_labels, group, y_hat, y, n_bootstrap, seed, n_jobs))
            results.append(balance_eo(dataset, predicted_labels, group, y, n_bootstrap, seed, n_jobs))
    return results


@dataclass
class IndependenceCheck:
    condition: str
    statement: str
    max_deviation: float
    stderr: float
    passed: bool
    n_strata: int
    empty_strata: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            "condition": self.condition,
            "statement": self.statement,
            "max_deviation": self.max_deviation,
            "stderr": self.stderr,
            "passed": self.passed,
            "n_strata": self.n_strata,
            "empty_strata": list(self.empty_strata),
        }


# (condition, statement, target variables, conditioning variables)
INDEPENDENCIES = (
    ("indBP", "T _||_ A | Y0", ("t",), ("y0",)),
    ("indBP", "(Y1, T) _||_ A", ("y1", "t"), ()),
    ("indPP", "T _||_ A | Y0, Y_hat", ("t",), ("y0", "y_hat")),
    ("indPP", "(Y1, T) _||_ A | Y_hat", ("y1", "t"), ("y_hat",)),
    ("indEO", "Y _||_ A", ("y",), ()),
    ("indEO", "Y0 _||_ A", ("y0",), ()),
    ("indEO", "T _||_ A | Y_hat, Y0", ("t",), ("y_hat", "y0")),
    ("indEO", "(Y1, Y_hat, T) _||_ A", ("y1", "y_hat", "t"), ()),
)


def _target_cells(target: Tuple[str, ...]):
    # a single binary target is fully described by its value-1 cell
    if len(target) == 1:
        return [(1,)]
    return list(product((0, 1), repeat=len(target)))


def _independence_check(condition, statement, target, given, cols) -> IndependenceCheck:
    a = cols["a"]
    worst_dev, worst_se, worst_z = 0.0, 0.0, 0.0
    passed = True
    empty, n_strata = [], 0
    for stratum_values in product((0, 1), repeat=len(given)):
        stratum = np.ones(len(a), dtype=bool)
        for name, value in zip(given, stratum_values):
            stratum &= cols[name] == value
        label = ", ".join(f"{n}={v}" for n, v in zip(given, stratum_values)) or "all rows"
        n_s = int(np.count_nonzero(stratum))
        if n_s == 0:
            empty.append(label)
            continue
        n_strata += 1
        for cell in _target_cells(target):
            in_cell = stratum.copy()
            for name, value in zip(target, cell):
                in_cell &= cols[name] == value
            p = np.count_nonzero(in_cell) / n_s
            for group in (0, 1):
                in_group = stratum & (a == group)
                n_sa = int(np.count_nonzero(in_group))
                if n_sa == 0:
                    empty.append(f"{label}, a={group}")
                    continue
                deviation = abs(np.count_nonzero(in_cell & in_group) / n_sa - p)
                se = math.sqrt(max(p * (1 - p) * (1 / n_sa - 1 / n_s), 0.0))
                if se > 0:
                    z = deviation / se
                else:
                    z = 0.0 if deviation == 0 else math.inf
                if z > SIGNIFICANCE:
                    passed = False
                if z > worst_z or (z == worst_z and deviation > worst_dev):
                    worst_dev, worst_se, worst_z = deviation, se, z
    return IndependenceCheck(condition, statement, float(worst_dev), float(worst_se), passed, n_strata, empty)


def independence_report(dataset: OracleDataset, predicted_labels=None) -> Dict[str, List[IndependenceCheck]]:
    """Per listed independence, the largest deviation of P(cell | strata, a) from P(cell | strata).

    A check fails when any deviation exceeds three standard errors. indPP and
    indEO need predicted labels and are skipped without them.
    """
    cols = {name: values.astype(int) for name, values in _oracle_columns(dataset).items()}
    if predicted_labels is not None:
        labels = as_binary(predicted_labels, "predicted_labels")
        if len(labels) != len(dataset):
            raise ParameterError(f"{len(labels)} labels for {len(dataset)} rows")
        cols["y_hat"] = labels.astype(int)

    needs_labels = {condition for condition, _, target, given in INDEPENDENCIES if "y_hat" in target + given}
    report: Dict[str, List[IndependenceCheck]] = {}
    for condition, statement, target, given in INDEPENDENCIES:
        if condition in needs_labels and "y_hat" not in cols:
            continue
        check = _independence_check(condition, statement, target, given, cols)
        if not check.passed:
            logger.info(f"{condition}: {statement} fails (max deviation {check.max_deviation:.4f}, se {check.stderr:.4f})")
        report.setdefault(condition, []).append(check)
    return report
