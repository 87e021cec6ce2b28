"""Shared data model: series, residuals, intervals, quantile grids.

All values are float64. NaN/Inf are rejected when a series is constructed,
so downstream numerics never need to re-validate. Interval endpoints may be
infinite (degenerate conformal sets are represented explicitly, never as a
sentinel), but never NaN. Intervals are closed on both ends.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class SpcitError(Exception):
    """Base for all package errors."""


class StructuralError(SpcitError):
    """Shapes/lengths of inputs do not line up."""


class DataValidationError(SpcitError):
    """Input values violate a contract (non-finite, out of range, ...)."""


class NumericError(SpcitError):
    """A computation produced non-finite values and cannot continue."""


def _as_float_array(x, name: str, ndim: int) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != ndim:
        raise StructuralError(f"{name} must be {ndim}-dimensional, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DataValidationError(f"{name} contains NaN or Inf")
    a = a.copy()
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ObservationSeries:
    """Time-indexed observations: features (T, d) and scalar outcomes (T,)."""

    features: np.ndarray
    outcomes: np.ndarray
    t0: int = 1
    feature_names: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "features", _as_float_array(self.features, "features", 2))
        object.__setattr__(self, "outcomes", _as_float_array(self.outcomes, "outcomes", 1))
        if len(self.features) != len(self.outcomes):
            raise StructuralError(
                f"features ({len(self.features)}) and outcomes ({len(self.outcomes)}) differ in length"
            )
        if len(self.outcomes) < 1:
            raise DataValidationError("series must contain at least one observation")
        if self.features.shape[1] < 1:
            raise DataValidationError("features must have dimension >= 1")
        if self.feature_names is not None:
            object.__setattr__(self, "feature_names", tuple(self.feature_names))
            if len(self.feature_names) != self.features.shape[1]:
                raise StructuralError("feature_names length does not match feature dimension")

    @property
    def length(self) -> int:
        return len(self.outcomes)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def times(self) -> np.ndarray:
        """Absolute time indices t0 .. t0+T-1."""
        return self.t0 + np.arange(self.length)

    def slice(self, start: int, stop: int) -> "ObservationSeries":
        """Positional slice [start, stop) preserving absolute time indices."""
        return ObservationSeries(
            self.features[start:stop],
            self.outcomes[start:stop],
            t0=self.t0 + start,
            feature_names=self.feature_names,
        )


@dataclass(frozen=True)
class ResidualSeries:
    """Point predictions and residuals aligned to a parent series."""

    point_predictions: np.ndarray
    residuals: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "point_predictions", _as_float_array(self.point_predictions, "point_predictions", 1)
        )
        object.__setattr__(self, "residuals", _as_float_array(self.residuals, "residuals", 1))
        if len(self.point_predictions) != len(self.residuals):
            raise StructuralError("point_predictions and residuals differ in length")

    def __len__(self) -> int:
        return len(self.residuals)


@dataclass(frozen=True)
class SignificanceLevel:
    """Miscoverage level alpha in (0, 1)."""

    alpha: float

    def __post_init__(self):
        a = float(self.alpha)
        if not (np.isfinite(a) and 0.0 < a < 1.0):
            raise DataValidationError(f"alpha must lie in (0, 1), got {self.alpha}")
        object.__setattr__(self, "alpha", a)


@dataclass(frozen=True)
class PredictionInterval:
    """Closed interval [lower, upper] for the outcome at time t.

    Endpoints may be +/-inf (degenerate conformal sets); NaN is rejected.
    """

    t: int
    lower: float
    upper: float
    alpha: SignificanceLevel

    def __post_init__(self):
        lo, hi = float(self.lower), float(self.upper)
        if np.isnan(lo) or np.isnan(hi):
            raise DataValidationError("interval endpoints must not be NaN")
        if lo > hi:
            raise DataValidationError(f"lower ({lo}) exceeds upper ({hi})")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def width(self) -> float:
        return self.upper - self.lower

    @property
    def is_finite(self) -> bool:
        return bool(np.isfinite(self.lower) and np.isfinite(self.upper))


@dataclass(frozen=True)
class QuantileGrid:
    """Quantile estimates ``values[k]`` at strictly increasing ``levels[k]``.

    Levels live in the closed interval [0, 1]; the endpoints are needed by
    the width-minimizing search, where they denote the support min/max of an
    empirical estimator. Values are only guaranteed non-decreasing after
    :func:`rearrange_monotone`.
    """

    levels: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        lv = _as_float_array(self.levels, "levels", 1)
        va = _as_float_array(self.values, "values", 1)
        if len(lv) != len(va):
            raise StructuralError("levels and values differ in length")
        if len(lv) == 0:
            raise DataValidationError("quantile grid must be nonempty")
        if np.any(lv < 0.0) or np.any(lv > 1.0):
            raise DataValidationError("levels must lie in [0, 1]")
        if np.any(np.diff(lv) <= 0.0):
            raise DataValidationError("levels must be strictly increasing")
        object.__setattr__(self, "levels", lv)
        object.__setattr__(self, "values", va)


def compute_residuals(series: ObservationSeries, point_predictions: Sequence[float]) -> ResidualSeries:
    """Residuals eps_t = y_t - yhat_t for every step of the series."""
    preds = np.asarray(point_predictions, dtype=np.float64)
    if preds.ndim != 1 or len(preds) != series.length:
        raise StructuralError(
            f"point_predictions length {preds.shape} does not match series length {series.length}"
        )
    if not np.all(np.isfinite(preds)):
        raise DataValidationError("point_predictions contain NaN or Inf")
    return ResidualSeries(preds, series.outcomes - preds)


def interval_contains(interval: PredictionInterval, y: float) -> bool:
    """Closed-interval containment: lower <= y <= upper."""
    return interval.lower <= y <= interval.upper


def rearrange_monotone(grid: QuantileGrid) -> QuantileGrid:
    """Repair quantile crossings by sorting values ascending (levels kept)."""
    return QuantileGrid(grid.levels, np.sort(grid.values))
