"""Forecast accuracy measures and the pattern-similarity measure.

AARE, AAE and RMSE score a forecast against observed speeds. AARD scores how
far a candidate detector's normalized pattern is from a reference detector's;
it divides by the candidate's values, so argument order matters.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import EmptyInput, LengthMismatch, NonPositiveActual, NonPositiveDenominator


def _pair(actual, predicted):
    a = np.asarray(actual, dtype=np.float64)
    p = np.asarray(predicted, dtype=np.float64)
    if a.ndim != 1 or p.ndim != 1:
        raise ValueError("metrics expect 1-D sequences")
    if a.size != p.size:
        raise LengthMismatch(f"actual has {a.size} points, predicted has {p.size}")
    if a.size == 0:
        raise EmptyInput("no data points to compare")
    return a, p


@dataclass(frozen=True)
class ForecastPair:
    actual: np.ndarray
    predicted: np.ndarray

    def __post_init__(self):
        a, p = _pair(self.actual, self.predicted)
        object.__setattr__(self, "actual", a)
        object.__setattr__(self, "predicted", p)

    def __len__(self):
        return int(self.actual.size)

    def tail(self, n: int) -> "ForecastPair":
        return ForecastPair(self.actual[-n:], self.predicted[-n:])

    def report(self) -> "AccuracyReport":
        return accuracy_report(self.actual, self.predicted)


def aare(actual, predicted) -> float:
    """Mean of |actual - predicted| / actual."""
    a, p = _pair(actual, predicted)
    if np.any(~(a > 0.0)):
        raise NonPositiveActual("AARE needs strictly positive actual speeds")
    return float(np.mean(np.abs(a - p) / a))


def aae(actual, predicted) -> float:
    """Mean absolute error, in the units of the inputs."""
    a, p = _pair(actual, predicted)
    return float(np.mean(np.abs(a - p)))


def rmse(actual, predicted) -> float:
    a, p = _pair(actual, predicted)
    return float(math.sqrt(np.mean((a - p) ** 2)))


def aard(candidate, reference) -> float:
    """Average absolute relative difference of ``reference`` from ``candidate``.

    Both are normalized series (or plain sequences) of equal length. The
    candidate, i.e. the unprocessed detector, supplies the denominators.
    """
    a = np.asarray(getattr(candidate, "values", candidate), dtype=np.float64)
    b = np.asarray(getattr(reference, "values", reference), dtype=np.float64)
    if a.size != b.size:
        raise LengthMismatch(f"patterns have lengths {a.size} and {b.size}")
    if a.size == 0:
        raise EmptyInput("empty pattern")
    if np.any(~(a > 0.0)):
        raise NonPositiveDenominator("candidate pattern must be strictly positive")
    return float(np.mean(np.abs(a - b) / a))


@dataclass(frozen=True)
class AccuracyReport:
    aare: float
    aae: float
    rmse: float
    n_points: int

    def to_dict(self) -> dict:
        return asdict(self)


def accuracy_report(actual, predicted) -> AccuracyReport:
    a, p = _pair(actual, predicted)
    return AccuracyReport(aare(a, p), aae(a, p), rmse(a, p), int(a.size))


@dataclass(frozen=True)
class AveragedReport:
    """Means over several models with the sample standard deviation of each."""

    aare: float
    aae: float
    rmse: float
    aare_std: float
    aae_std: float
    rmse_std: float
    count: int

    @property
    def mean(self) -> AccuracyReport:
        return AccuracyReport(self.aare, self.aae, self.rmse, self.count)

    def to_dict(self) -> dict:
        return asdict(self)


def average_reports(reports: Sequence[AccuracyReport]) -> AveragedReport:
    if len(reports) == 0:
        raise EmptyInput("no reports to average")
    cols = np.array([[r.aare, r.aae, r.rmse] for r in reports], dtype=np.float64)
    means = cols.mean(axis=0)
    stds = cols.std(axis=0, ddof=1) if len(reports) > 1 else np.zeros(3)
    return AveragedReport(
        float(means[0]), float(means[1]), float(means[2]),
        float(stds[0]), float(stds[1]), float(stds[2]),
        len(reports),
    )
