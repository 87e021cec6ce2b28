"""Transformer-decoder conditional quantile regressor (from-scratch numpy)."""

from .network import DecoderConfig, DecoderNetwork, predict_quantile_grid
from .training import (
    Adam,
    TrainResult,
    load_checkpoint,
    mean_pinball,
    pinball_batch,
    pinball_loss,
    save_checkpoint,
    train,
    write_loss_curve,
)
from .windows import Standardizer, build_windows

__all__ = [
    "Adam",
    "DecoderConfig",
    "DecoderNetwork",
    "Standardizer",
    "TrainResult",
    "build_windows",
    "load_checkpoint",
    "mean_pinball",
    "pinball_batch",
    "pinball_loss",
    "predict_quantile_grid",
    "save_checkpoint",
    "train",
    "write_loss_curve",
]
