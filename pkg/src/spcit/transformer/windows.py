"""Sliding-window example construction and train-statistics scaling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import DataValidationError, ObservationSeries, ResidualSeries, StructuralError


def build_windows(residuals, features, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Windowed examples: inputs (N, w, d+1), targets (N,).

    Window i holds rows [X_s, eps_s] for s = i..i+w-1 (oldest first) and
    targets eps_{i+w}; there is one example per target t in [w+1, T].
    """
    eps = residuals.residuals if isinstance(residuals, ResidualSeries) else np.asarray(residuals, float)
    X = features.features if isinstance(features, ObservationSeries) else np.asarray(features, float)
    if eps.ndim != 1 or X.ndim != 2 or len(X) != len(eps):
        raise StructuralError(f"misaligned inputs: features {X.shape}, residuals {eps.shape}")
    T = len(eps)
    if w < 1:
        raise DataValidationError("window length must be >= 1")
    if T <= w:
        raise DataValidationError(f"series of length {T} too short for window {w}")
    Z = np.hstack([X, eps[:, None]])
    windows = np.stack([Z[i : i + w] for i in range(T - w)])
    return windows, eps[w:].copy()


@dataclass
class Standardizer:
    """Z-scoring with training-split statistics; residual scale is scalar."""

    feature_mean: np.ndarray
    feature_std: np.ndarray
    resid_mean: float
    resid_std: float

    @classmethod
    def fit(cls, features: np.ndarray, residuals: np.ndarray) -> "Standardizer":
        features = np.asarray(features, dtype=np.float64)
        residuals = np.asarray(residuals, dtype=np.float64)
        fs = features.std(axis=0)
        rs = float(residuals.std())
        return cls(
            features.mean(axis=0),
            np.where(fs > 1e-12, fs, 1.0),
            float(residuals.mean()),
            rs if rs > 1e-12 else 1.0,
        )

    def transform_features(self, features: np.ndarray) -> np.ndarray:
        return (features - self.feature_mean) / self.feature_std

    def transform_residuals(self, residuals: np.ndarray) -> np.ndarray:
        return (residuals - self.resid_mean) / self.resid_std

    def inverse_residuals(self, values: np.ndarray) -> np.ndarray:
        return values * self.resid_std + self.resid_mean
