"""Pinball-loss training with Adam, validation snapshots, checkpoints.

The minibatch loss is the mean over examples of the mean over quantile
levels of the pinball loss. At the kink (target == prediction) the
subgradient takes the slope-p branch. Training is single threaded and fully
deterministic given (config, data): example shuffling and dropout draw from
seeds derived from ``config.seed``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..core import DataValidationError, NumericError
from ..rng import Stream, derive_seed
from .network import DecoderConfig, DecoderNetwork


def pinball_loss(eps: float, eps_pred: float, p: float) -> float:
    """p*(eps-eps') when eps >= eps', else (1-p)*(eps'-eps)."""
    if not 0.0 <= p <= 1.0:
        raise DataValidationError(f"quantile level {p} outside [0, 1]")
    diff = eps - eps_pred
    return p * diff if diff >= 0 else (p - 1.0) * diff


def pinball_batch(preds: np.ndarray, targets: np.ndarray, levels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean pinball loss over (examples, levels) and its gradient in preds."""
    diff = targets[:, None] - preds  # (B, K)
    ge = diff >= 0
    loss = float(np.mean(np.where(ge, levels * diff, (levels - 1.0) * diff)))
    dpreds = np.where(ge, -levels, 1.0 - levels) / diff.size
    return loss, dpreds


def mean_pinball(preds: np.ndarray, targets: np.ndarray, levels: np.ndarray) -> float:
    diff = targets[:, None] - preds
    return float(np.mean(np.where(diff >= 0, levels * diff, (levels - 1.0) * diff)))


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


@dataclass
class TrainResult:
    train_losses: list[float]
    val_losses: list[float]
    best_epoch: int
    best_val_loss: float
    continued_epochs: int = 0


def _epoch(
    model: DecoderNetwork,
    adam: Adam,
    windows: np.ndarray,
    targets: np.ndarray,
    levels: np.ndarray,
    batch_size: int,
    shuffle: Stream,
    dropout: Stream,
    tag: str,
) -> float:
    perm = shuffle.permutation(len(targets))
    total = 0.0
    count = 0
    for start in range(0, len(perm), batch_size):
        idx = perm[start : start + batch_size]
        preds = model.forward(windows[idx], train=True, stream=dropout)
        loss, dpreds = pinball_batch(preds, targets[idx], levels)
        if not math.isfinite(loss):
            raise NumericError(f"non-finite loss in {tag} at step {count + 1}; aborting run")
        model.zero_grads()
        model.backward_last(dpreds)
        adam.step(model.params(), model.grads())
        total += loss * len(idx)
        count += len(idx)
    return total / count


def evaluate_loss(model: DecoderNetwork, windows: np.ndarray, targets: np.ndarray) -> float:
    levels = np.array(model.cfg.quantile_levels)
    return mean_pinball(model.forward(windows, train=False), targets, levels)


def train(
    config: DecoderConfig,
    train_windows: np.ndarray,
    train_targets: np.ndarray,
    val_windows: np.ndarray,
    val_targets: np.ndarray,
    continue_on_validation: bool = False,
    log=None,
) -> tuple[DecoderNetwork, TrainResult]:
    """Fit the decoder; return the lowest-validation-loss snapshot.

    With ``continue_on_validation`` the returned weights get a continuation
    phase on the validation windows for ceil(0.1 * max_epochs) extra epochs
    (no further model selection).
    """
    if len(train_targets) == 0 or len(val_targets) == 0:
        raise DataValidationError("train and validation window sets must be nonempty")
    model = DecoderNetwork(config)
    adam = Adam(config.learning_rate)
    shuffle = Stream(derive_seed(config.seed, 1))
    dropout = Stream(derive_seed(config.seed, 2))
    levels = np.array(config.quantile_levels)

    result = TrainResult([], [], best_epoch=0, best_val_loss=math.inf)
    best = model.snapshot()
    for epoch in range(1, config.max_epochs + 1):
        tr = _epoch(model, adam, train_windows, train_targets, levels,
                    config.batch_size, shuffle, dropout, f"epoch {epoch}")
        va = evaluate_loss(model, val_windows, val_targets)
        result.train_losses.append(tr)
        result.val_losses.append(va)
        if va < result.best_val_loss:
            result.best_val_loss = va
            result.best_epoch = epoch
            best = model.snapshot()
        if log is not None:
            log(f"epoch {epoch}/{config.max_epochs}: train {tr:.6f} val {va:.6f}")
        if (
            config.early_stop_patience is not None
            and epoch - result.best_epoch >= config.early_stop_patience
        ):
            break
    model.load_snapshot(best)

    if continue_on_validation:
        extra = math.ceil(0.1 * config.max_epochs)
        for epoch in range(1, extra + 1):
            tr = _epoch(model, adam, val_windows, val_targets, levels,
                        config.batch_size, shuffle, dropout, f"continuation epoch {epoch}")
            result.train_losses.append(tr)
            if log is not None:
                log(f"continuation {epoch}/{extra}: train {tr:.6f}")
        result.continued_epochs = extra
    return model, result


# --------------------------------------------------------------- artifacts

CHECKPOINT_FORMAT = "spcit-decoder"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, model: DecoderNetwork, result: TrainResult | None = None) -> None:
    """Versioned npz checkpoint: config echo, flat parameters, train metadata."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "training": None if result is None else {
            "best_epoch": result.best_epoch,
            "best_val_loss": result.best_val_loss,
            "epochs_run": len(result.train_losses),
            "continued_epochs": result.continued_epochs,
        },
    }
    arrays = {f"param:{k}": v for k, v in model.params().items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path: str | Path) -> tuple[DecoderNetwork, dict]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise DataValidationError(f"{path}: not a spcit decoder checkpoint")
        cfg_dict = dict(meta["config"])
        cfg_dict["quantile_levels"] = tuple(cfg_dict["quantile_levels"])
        config = DecoderConfig(**cfg_dict)
        model = DecoderNetwork(config)
        snap = {k[len("param:"):]: data[k] for k in data.files if k.startswith("param:")}
        model.load_snapshot(snap)
    return model, meta


def write_loss_curve(path: str | Path, result: TrainResult) -> None:
    """CSV loss curve: epoch, train_loss, val_loss (blank once validation stops)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for i, tr in enumerate(result.train_losses, start=1):
            va = result.val_losses[i - 1] if i <= len(result.val_losses) else ""
            writer.writerow([i, repr(tr), repr(va) if va != "" else ""])
