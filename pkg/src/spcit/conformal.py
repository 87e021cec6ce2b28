"""Sequential interval constructors on top of conditional quantile estimators.

The width-minimizing search scans an 11-point offset grid on [0, alpha]:
the interval [f_hat + Q(beta), f_hat + Q(1 - alpha + beta)] keeps the offset
whose estimated width is smallest, ties toward smaller beta. The same search
runs on conditional estimators (forest or decoder) and on the plain empirical
window quantiles; the NexCP baseline instead uses decay-weighted absolute
residual scores with the conservative extra mass at +infinity.

All sequential protocols feed the true residual of each scored step back
into the history before the next step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .core import (
    DataValidationError,
    ObservationSeries,
    PredictionInterval,
    ResidualSeries,
    SignificanceLevel,
    StructuralError,
)
from .forest import ForestEnsemble, qrf_weights, weighted_left_quantiles
from .transformer.network import DecoderNetwork
from .transformer.windows import Standardizer

METHODS = ("spci-t", "spci", "enbpi", "nexcp")


@dataclass(frozen=True)
class BetaGrid:
    """Offset grid for the lower interval endpoint: 11 points on [0, alpha]."""

    alpha: SignificanceLevel
    betas: np.ndarray = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "betas", np.linspace(0.0, self.alpha.alpha, 11))


@dataclass(frozen=True)
class QuantileLevelSet:
    """The levels an estimator must produce for the beta search.

    ``levels`` is the sorted union of the beta grid, its upper counterparts
    1 - alpha + beta, and the median; ``lower_idx``/``upper_idx`` locate each
    beta pair inside ``levels``.
    """

    alpha: float
    betas: np.ndarray
    levels: np.ndarray
    lower_idx: np.ndarray
    upper_idx: np.ndarray
    median_idx: int

    @classmethod
    def for_alpha(cls, alpha: float) -> "QuantileLevelSet":
        grid = BetaGrid(SignificanceLevel(alpha))
        betas = grid.betas
        uppers = 1.0 - alpha + betas
        levels = np.unique(np.concatenate([betas, uppers, [0.5]]))
        return cls(
            alpha=alpha,
            betas=betas,
            levels=levels,
            lower_idx=np.searchsorted(levels, betas),
            upper_idx=np.searchsorted(levels, uppers),
            median_idx=int(np.searchsorted(levels, 0.5)),
        )


@dataclass(frozen=True)
class BetaHat:
    beta: float
    lower_q: float
    upper_q: float
    index: int


def beta_hat(values: np.ndarray, level_set: QuantileLevelSet) -> BetaHat:
    """Grid argmin of Q(1-alpha+beta) - Q(beta); ties toward smaller beta."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape != level_set.levels.shape:
        raise StructuralError(
            f"need quantile values at all {len(level_set.levels)} levels, got {values.shape}"
        )
    widths = values[level_set.upper_idx] - values[level_set.lower_idx]
    widths = np.where(np.isnan(widths), np.inf, widths)  # inf - inf pairs lose
    j = int(np.argmin(widths))
    return BetaHat(
        float(level_set.betas[j]),
        float(values[level_set.lower_idx[j]]),
        float(values[level_set.upper_idx[j]]),
        j,
    )


class ResidualQuantileEstimator(Protocol):
    """Maps the latest window of (features, residuals) to quantile values.

    ``quantile_values`` returns monotone (crossing-repaired) values at
    ``level_set.levels``.
    """

    level_set: QuantileLevelSet

    def quantile_values(self, feature_window: np.ndarray, resid_window: np.ndarray) -> np.ndarray: ...


@dataclass
class EmpiricalWindowEstimator:
    """Left-continuous empirical quantiles of the raw residual window (EnbPI)."""

    level_set: QuantileLevelSet

    def quantile_values(self, feature_window, resid_window) -> np.ndarray:
        resid_window = np.asarray(resid_window, dtype=np.float64)
        if len(resid_window) == 0:
            raise DataValidationError("empty residual history")
        w = np.full(len(resid_window), 1.0 / len(resid_window))
        return weighted_left_quantiles(resid_window, w, self.level_set.levels)


@dataclass
class ForestResidualEstimator:
    """Weighted-quantile forest over flattened [X, eps] windows (SPCI)."""

    ensemble: ForestEnsemble
    targets: np.ndarray
    level_set: QuantileLevelSet

    def quantile_values(self, feature_window, resid_window) -> np.ndarray:
        z = np.hstack([np.asarray(feature_window), np.asarray(resid_window)[:, None]]).ravel()
        values = weighted_left_quantiles(self.targets, qrf_weights(self.ensemble, z), self.level_set.levels)
        return np.sort(values)  # already monotone; keeps the contract explicit


@dataclass
class DecoderResidualEstimator:
    """Trained decoder emitting the full level grid jointly (SPCI-T)."""

    model: DecoderNetwork
    scaler: Standardizer
    level_set: QuantileLevelSet

    def __post_init__(self):
        got = np.array(self.model.cfg.quantile_levels)
        if got.shape != self.level_set.levels.shape or not np.allclose(got, self.level_set.levels):
            raise StructuralError("decoder quantile heads do not match the requested level set")

    def quantile_values(self, feature_window, resid_window) -> np.ndarray:
        window = np.hstack(
            [
                self.scaler.transform_features(np.asarray(feature_window)),
                self.scaler.transform_residuals(np.asarray(resid_window))[:, None],
            ]
        )
        raw = self.model.forward(window, train=False)[0]
        return np.sort(self.scaler.inverse_residuals(raw))


@dataclass(frozen=True)
class IntervalMethodConfig:
    method: str
    window_w: int
    alpha: float = 0.1
    horizon_s: int = 1
    nexcp_rho: float = 0.99
    refit_period: int | None = None
    multistep_fill: str = "median"  # or "zero"

    def __post_init__(self):
        if self.method not in METHODS:
            raise DataValidationError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.window_w < 1 or self.horizon_s < 1:
            raise DataValidationError("window_w and horizon_s must be >= 1")
        if not 0.0 < self.nexcp_rho <= 1.0:
            raise DataValidationError("nexcp_rho must lie in (0, 1]")
        if self.multistep_fill not in ("median", "zero"):
            raise DataValidationError(f"unknown multistep fill {self.multistep_fill!r}")
        SignificanceLevel(self.alpha)  # validates alpha


def spci_interval(
    point_pred: float,
    values: np.ndarray,
    level_set: QuantileLevelSet,
    t: int,
) -> PredictionInterval:
    """[f_hat + Q(beta_hat), f_hat + Q(1 - alpha + beta_hat)]."""
    found = beta_hat(values, level_set)
    return PredictionInterval(
        t, point_pred + found.lower_q, point_pred + found.upper_q, SignificanceLevel(level_set.alpha)
    )


def _check_test_range(n_total: int, test_start: int, w: int) -> None:
    if test_start >= n_total:
        raise DataValidationError("test range is empty")
    if test_start - w < 0:
        raise DataValidationError(f"test start {test_start} leaves no room for window {w}")


def sequential_spci(
    series: ObservationSeries,
    residuals: ResidualSeries,
    estimator: ResidualQuantileEstimator,
    config: IntervalMethodConfig,
    test_start: int,
    refit: Callable[[int], ResidualQuantileEstimator] | None = None,
    window_log: list | None = None,
) -> list[PredictionInterval]:
    """One interval per test position, the window sliding over observed residuals.

    After scoring position p the true residual at p is already part of the
    history used at p+1 (feedback). ``refit(upto)`` rebuilds the estimator
    from data before ``upto`` every ``config.refit_period`` steps.
    """
    w = config.window_w
    T = series.length
    if len(residuals) != T:
        raise StructuralError("residual series does not match the observation series")
    _check_test_range(T, test_start, w)
    level_set = estimator.level_set
    eps = residuals.residuals
    out = []
    for step, pos in enumerate(range(test_start, T)):
        if refit is not None and config.refit_period and step > 0 and step % config.refit_period == 0:
            estimator = refit(pos)
        fw = series.features[pos - w : pos]
        rw = eps[pos - w : pos]
        if window_log is not None:
            window_log.append((pos, rw.copy()))
        values = estimator.quantile_values(fw, rw)
        out.append(spci_interval(residuals.point_predictions[pos], values, level_set, int(series.t0 + pos)))
    return out


def enbpi_interval(
    point_pred: float, residual_history: np.ndarray, alpha: float, t: int = 0
) -> PredictionInterval:
    """Width-minimized empirical-quantile interval over the sliding history."""
    residual_history = np.asarray(residual_history, dtype=np.float64)
    if len(residual_history) == 0:
        raise DataValidationError("empty residual history")
    level_set = QuantileLevelSet.for_alpha(alpha)
    est = EmpiricalWindowEstimator(level_set)
    return spci_interval(point_pred, est.quantile_values(None, residual_history), level_set, t)


def nexcp_quantile(abs_residual_history: np.ndarray, alpha: float, rho: float) -> float:
    """Decay-weighted score quantile with the +inf correction point.

    History is ordered oldest to newest; the item k steps back weighs rho^k,
    the virtual +inf point weighs rho^0 = 1. Returns +inf when no finite
    score reaches cumulative weight 1 - alpha.
    """
    scores = np.asarray(abs_residual_history, dtype=np.float64)
    if len(scores) == 0:
        raise DataValidationError("empty residual history")
    n = len(scores)
    weights = rho ** np.arange(n, 0, -1, dtype=np.float64)
    total = weights.sum() + 1.0  # +inf point carries the current-time weight
    order = np.argsort(scores, kind="stable")
    cum = np.cumsum(weights[order]) / total
    hit = np.nonzero(cum >= 1.0 - alpha)[0]
    if len(hit) == 0:
        return math.inf
    return float(scores[order][hit[0]])


def nexcp_interval(
    point_pred: float, abs_residual_history: np.ndarray, alpha: float, rho: float, t: int = 0
) -> PredictionInterval:
    q = nexcp_quantile(abs_residual_history, alpha, rho)
    return PredictionInterval(t, point_pred - q, point_pred + q, SignificanceLevel(alpha))


def sequential_enbpi(
    series: ObservationSeries,
    residuals: ResidualSeries,
    config: IntervalMethodConfig,
    test_start: int,
) -> list[PredictionInterval]:
    est = EmpiricalWindowEstimator(QuantileLevelSet.for_alpha(config.alpha))
    return sequential_spci(series, residuals, est, config, test_start)


def sequential_nexcp(
    series: ObservationSeries,
    residuals: ResidualSeries,
    config: IntervalMethodConfig,
    test_start: int,
) -> list[PredictionInterval]:
    """NexCP over the full growing history (it does not use the past window)."""
    T = series.length
    _check_test_range(T, test_start, 1)
    eps = residuals.residuals
    out = []
    for pos in range(test_start, T):
        out.append(
            nexcp_interval(
                residuals.point_predictions[pos],
                np.abs(eps[:pos]),
                config.alpha,
                config.nexcp_rho,
                int(series.t0 + pos),
            )
        )
    return out


def multistep_intervals(
    series: ObservationSeries,
    residuals: ResidualSeries,
    estimator: ResidualQuantileEstimator,
    s: int,
    config: IntervalMethodConfig,
    test_start: int,
) -> list[PredictionInterval]:
    """s-step-ahead intervals via generative rollout.

    Scoring position p uses residuals observed through p-s; the s-1 gap
    entries are filled with the estimator's own predicted median (or zero,
    per config) while the known features advance the window.
    """
    if s < 1:
        raise DataValidationError("horizon must be >= 1")
    if s == 1:
        return sequential_spci(series, residuals, estimator, config, test_start)
    w = config.window_w
    T = series.length
    _check_test_range(T, test_start, w)
    if test_start - s + 1 - w < 0:
        raise DataValidationError(f"horizon {s} leaves no room for window {w} before the test block")
    level_set = estimator.level_set
    eps = residuals.residuals
    out = []
    for pos in range(test_start, T):
        work = eps[:pos].copy()
        for u in range(pos - s + 1, pos):
            if config.multistep_fill == "median":
                fw = series.features[u - w : u]
                rw = work[u - w : u]
                work[u] = estimator.quantile_values(fw, rw)[level_set.median_idx]
            else:
                work[u] = 0.0
        values = estimator.quantile_values(series.features[pos - w : pos], work[pos - w : pos])
        out.append(spci_interval(residuals.point_predictions[pos], values, level_set, int(series.t0 + pos)))
    return out
