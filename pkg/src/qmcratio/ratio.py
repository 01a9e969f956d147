"""Ratio-of-integrals error estimation from two-level sample averages.

Both target quantities have the form num/den of two integrals approximated
by the same lattice averages.  The two-level combination

    E = (den_prev * num - den * num_prev) / ((b * den - den_prev) * den)

is an asymptotically exact estimate of the quadrature error of the ratio,
and the discretization bound

    c * (den * num_err + ||num|| * den_err) / (den^2 - c * den_err * den)

controls the finite element part; their sum is the combined estimator.
Guard violations (pre-asymptotic data) are flagged, never raised.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

Value = Union[float, np.ndarray]


@dataclass(frozen=True)
class RatioLevelData:
    """Two-level averages and FE error aggregates for one (m, h) pair.

    ``den``/``den_prev`` are the scalar denominator averages at levels m and
    m-1; ``num``/``num_prev`` the numerator averages (scalar or P1 field).
    ``den_err``/``num_err`` are the aggregated per-sample FE bounds at level
    m.  ``base`` is the lattice base b.
    """

    den: float
    den_prev: float
    num: Value
    num_prev: Value
    den_err: float = 0.0
    num_err: float = 0.0
    base: int = 2
    level: int = 0
    h_max: float = 0.0

    def __post_init__(self):
        if self.den_err < 0 or self.num_err < 0:
            raise ValueError("FE error aggregates must be nonnegative")


@dataclass(frozen=True)
class EstimatorReport:
    """Scalar estimator components for one (m, h) pair with validity flags."""

    qmc_term: float
    fem_term: float
    qmc_valid: bool
    fem_valid: bool
    level: int = 0
    h_max: float = 0.0
    den: float = 0.0
    num_norm: float = 0.0
    den_err: float = 0.0
    num_err: float = 0.0

    @property
    def valid(self) -> bool:
        return self.qmc_valid and self.fem_valid

    @property
    def total(self) -> float:
        """Combined estimate; NaN unless both components are valid."""
        if not self.valid:
            return float("nan")
        return self.qmc_term + self.fem_term

    CSV_HEADER = (
        "m",
        "h_max",
        "qmc_term",
        "fem_term",
        "est",
        "qmc_valid",
        "fem_valid",
        "den",
        "num_norm",
        "den_err",
        "num_err",
    )

    def csv_row(self) -> list:
        return [
            self.level,
            repr(self.h_max),
            repr(self.qmc_term),
            repr(self.fem_term),
            repr(self.total),
            int(self.qmc_valid),
            int(self.fem_valid),
            repr(self.den),
            repr(self.num_norm),
            repr(self.den_err),
            repr(self.num_err),
        ]


def qmc_ratio_estimator(data: RatioLevelData) -> tuple[Value, bool]:
    """Two-level quadrature error estimate for the ratio num/den.

    Returns the estimate and a validity flag; the guard b*den - den_prev > 0
    and den > 0 marks the pre-asymptotic regime instead of raising.
    """
    b = data.base
    denom_guard = b * data.den - data.den_prev
    if not (data.den > 0.0 and denom_guard > 0.0):
        zero = np.zeros_like(np.asarray(data.num, dtype=float))
        return (zero if isinstance(data.num, np.ndarray) else 0.0), False
    est = (data.den_prev * np.asarray(data.num, dtype=float) - data.den * np.asarray(data.num_prev, dtype=float)) / (
        denom_guard * data.den
    )
    if not isinstance(data.num, np.ndarray):
        est = float(est)
    return est, True


def fem_ratio_bound(
    den: float,
    num_norm: float,
    den_err: float,
    num_err: float,
    c: float = 1.0,
) -> tuple[float, bool]:
    """Discretization bound for the ratio; invalid when den <= c * den_err.

    Pre-asymptotic meshes where the guard fails are flagged rather than
    producing a negative bound.
    """
    if den_err < 0 or num_err < 0:
        raise ValueError("error aggregates must be nonnegative")
    denominator = den * den - c * den_err * den
    if not (den > 0.0 and denominator > 0.0):
        return 0.0, False
    return c * (den * num_err + num_norm * den_err) / denominator, True


def combined_estimator(
    data: RatioLevelData,
    norm: Optional[Callable[[Value], float]] = None,
    c: float = 1.0,
) -> EstimatorReport:
    """Combined two-level + discretization estimate for one (m, h) pair.

    ``norm`` maps numerator values to their magnitude (absolute value for
    scalars, a discrete L2 norm for field-valued numerators).
    """
    if norm is None:
        norm = lambda v: float(abs(v))
    qmc_est, qmc_valid = qmc_ratio_estimator(data)
    qmc_term = norm(qmc_est) if qmc_valid else float("nan")
    num_norm = norm(data.num)
    fem_term, fem_valid = fem_ratio_bound(data.den, num_norm, data.den_err, data.num_err, c=c)
    return EstimatorReport(
        qmc_term=float(qmc_term) if qmc_valid else float("nan"),
        fem_term=float(fem_term) if fem_valid else float("nan"),
        qmc_valid=qmc_valid,
        fem_valid=fem_valid,
        level=data.level,
        h_max=data.h_max,
        den=data.den,
        num_norm=num_norm,
        den_err=data.den_err,
        num_err=data.num_err,
    )


def aggregate_zeta(per_sample: np.ndarray, expected_count: Optional[int] = None) -> float:
    """Average per-sample FE bounds over the lattice points of one level."""
    arr = np.asarray(per_sample, dtype=float)
    if expected_count is not None and arr.shape[0] != expected_count:
        raise ValueError(f"expected {expected_count} per-sample values, got {arr.shape[0]}")
    if np.any(arr < 0):
        raise ValueError("per-sample bounds must be nonnegative")
    from .qmc import sample_mean

    return float(sample_mean(arr))


def write_report_csv(path: str, reports: list[EstimatorReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EstimatorReport.CSV_HEADER)
        for rep in reports:
            w.writerow(rep.csv_row())
