"""Domain types shared by every module, plus normalization and grid snapping."""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from typing import Sequence

import numpy as np

from .errors import (
    NonFiniteInput,
    NonPositiveReference,
    NonPositiveSpeed,
    OffGrid,
)

DEFAULT_REFERENCE_SPEED = 70.0
DEFAULT_INTERVAL_MINUTES = 5
EPOCH_START = datetime(2017, 10, 16, tzinfo=timezone.utc)

DetectorId = str


@dataclass(frozen=True)
class Axis:
    """One hyperparameter dimension: bounds and step of its grid."""

    name: str
    low: float
    high: float
    step: float

    @property
    def span(self) -> float:
        return self.high - self.low

    @property
    def size(self) -> int:
        return int(round(self.span / self.step)) + 1

    def index_of(self, value: float) -> int:
        """Grid index of ``value``, rounding ties toward the larger index."""
        q = (value - self.low) / self.step
        # tolerance absorbs representation error such as 0.015 / 0.01
        return int(math.floor(q + 0.5 + 1e-9))

    def value_at(self, index: int) -> float:
        index = min(max(index, 0), self.size - 1)
        if self.name == "r_learn":
            return round((index + 1) / 100.0, 2)
        return self.low + index * self.step

    def snap(self, value: float) -> float:
        clamped = min(max(value, self.low), self.high)
        return self.value_at(self.index_of(clamped))

    def values(self) -> list:
        return [self.value_at(i) for i in range(self.size)]


AXES = (
    Axis("r_learn", 0.01, 0.2, 0.01),
    Axis("n_layer", 1, 10, 1),
    Axis("n_unit", 2, 40, 2),
    Axis("ep", 100, 1000, 20),
)
AXIS_NAMES = tuple(a.name for a in AXES)


@dataclass(frozen=True, order=True)
class HyperParams:
    """A point on the tuning grid: learning rate, layers, units, epochs."""

    r_learn: float
    n_layer: int
    n_unit: int
    ep: int

    def __post_init__(self):
        values = self.as_tuple()
        if not all(math.isfinite(v) for v in values):
            raise NonFiniteInput(f"non-finite hyperparameter in {values}")
        for axis, v in zip(AXES, values):
            if v < axis.low - 1e-9 or v > axis.high + 1e-9:
                raise OffGrid(f"{axis.name}={v} outside [{axis.low}, {axis.high}]")
            if abs(v - axis.low - round((v - axis.low) / axis.step) * axis.step) > 1e-9:
                raise OffGrid(f"{axis.name}={v} is not on the {axis.step} grid")
        object.__setattr__(self, "r_learn", round(float(self.r_learn), 2))
        for name in ("n_layer", "n_unit", "ep"):
            object.__setattr__(self, name, int(round(getattr(self, name))))

    def as_tuple(self) -> tuple:
        return (self.r_learn, self.n_layer, self.n_unit, self.ep)

    def as_list(self) -> list:
        return list(self.as_tuple())

    @classmethod
    def from_sequence(cls, values: Sequence[float]) -> "HyperParams":
        r, layer, unit, ep = values
        return cls(float(r), int(round(layer)), int(round(unit)), int(round(ep)))

    def __str__(self) -> str:
        return f"({self.r_learn:.2f}, {self.n_layer}, {self.n_unit}, {self.ep})"


DEFAULT_HYPERPARAMS = HyperParams(0.01, 1, 2, 100)


@dataclass(frozen=True)
class Thresholds:
    thd_aare: float = 0.05
    thd_aard: float = 0.1

    def __post_init__(self):
        for name in ("thd_aare", "thd_aard"):
            v = getattr(self, name)
            if not (0.0 < v < 1.0):
                raise ValueError(f"{name} must lie in (0, 1), got {v}")


def _frozen_array(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SpeedSeries:
    """Speeds (mph) of one detector sampled at a fixed interval."""

    detector: DetectorId
    values: np.ndarray
    interval_minutes: int = DEFAULT_INTERVAL_MINUTES
    start: datetime = EPOCH_START
    interpolated: int = 0

    def __post_init__(self):
        if not self.detector:
            raise ValueError("detector id must be non-empty")
        if self.interval_minutes <= 0:
            raise ValueError("interval_minutes must be positive")
        values = _frozen_array(self.values)
        if values.ndim != 1 or values.size == 0:
            raise NonPositiveSpeed("speed series must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(values)):
            raise NonFiniteInput(f"{self.detector}: non-finite speed value")
        if np.any(values <= 0.0):
            raise NonPositiveSpeed(f"{self.detector}: speeds must be > 0")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return int(self.values.size)

    @property
    def points_per_day(self) -> int:
        return 24 * 60 // self.interval_minutes

    def slice(self, begin: int, end: int | None = None) -> "SpeedSeries":
        n = len(self)
        begin = begin if begin >= 0 else n + begin
        return SpeedSeries(
            self.detector,
            self.values[begin:end],
            self.interval_minutes,
            self.start + timedelta(minutes=self.interval_minutes * begin),
        )

    def with_values(self, values) -> "SpeedSeries":
        return SpeedSeries(self.detector, values, self.interval_minutes, self.start)

    def __eq__(self, other):
        if not isinstance(other, SpeedSeries):
            return NotImplemented
        return (
            self.detector == other.detector
            and self.interval_minutes == other.interval_minutes
            and self.start == other.start
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True, eq=False)
class NormalizedSeries:
    detector: DetectorId
    values: np.ndarray
    reference_speed: float = DEFAULT_REFERENCE_SPEED

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen_array(self.values))

    def __len__(self) -> int:
        return int(self.values.size)


def normalize(series, reference_speed: float = DEFAULT_REFERENCE_SPEED) -> NormalizedSeries:
    """Divide every speed by the fixed reference speed (e.g. a 70 mph limit).

    ``series`` is a :class:`SpeedSeries` or any 1-D sequence of speeds.
    """
    if not (reference_speed > 0.0) or not math.isfinite(reference_speed):
        raise NonPositiveReference(f"reference speed must be > 0, got {reference_speed}")
    detector = getattr(series, "detector", "")
    values = np.asarray(getattr(series, "values", series), dtype=np.float64)
    if np.any(~(values > 0.0)):
        raise NonPositiveSpeed(f"{detector or 'series'}: speeds must be > 0")
    return NormalizedSeries(detector, values / reference_speed, float(reference_speed))


def snap_to_grid(raw: Sequence[float]) -> HyperParams:
    """Project four reals onto the hyperparameter grid.

    Each coordinate is clamped to its domain and rounded to the nearest grid
    step, ties going to the larger value.
    """
    raw = [float(v) for v in raw]
    if len(raw) != 4:
        raise ValueError(f"expected 4 coordinates, got {len(raw)}")
    if not all(math.isfinite(v) for v in raw):
        raise NonFiniteInput(f"cannot snap non-finite point {raw}")
    return HyperParams.from_sequence([axis.snap(v) for axis, v in zip(AXES, raw)])


def grid_points():
    """Iterate over every hyperparameter setting on the grid."""
    import itertools

    for combo in itertools.product(*(a.values() for a in AXES)):
        yield HyperParams.from_sequence(combo)
