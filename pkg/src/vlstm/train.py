"""Mini-batch Adam training with validation early stopping."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from typing import IO, Callable

import numpy as np

from .data import WindowedDataset
from .model import ForecastModel, loss, loss_and_grads

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 1000
    patience: int = 5
    seed: int = 0
    shuffle: bool = True
    clip_norm: float = 10.0

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ValueError("batch_size, patience and max_epochs must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")


@dataclass
class TrainResult:
    epochs_run: int
    converged: bool
    train_curve: list[float]
    val_curve: list[float]
    best_val_loss: float
    best_epoch: int  # 1-based
    final_model: ForecastModel
    diverged: bool = False
    clipped_steps: int = 0
    log_rows: list[tuple] = field(default_factory=list)


class Adam:
    """Adam with bias-corrected moments."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update ``params`` in place."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in params.items():
            g = grads[k]
            if p.shape != g.shape:
                raise ValueError(f"{k}: gradient shape {g.shape} != parameter shape {p.shape}")
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * (g * g)
            p -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def optimizer_step(params, grads, state: Adam | None = None, lr: float = 1e-3) -> Adam:
    """Functional face of :class:`Adam`; returns the (possibly new) state."""
    state = state or Adam(lr)
    state.lr = lr
    state.step(params, grads)
    return state


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> bool:
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if total > max_norm:
        scale = max_norm / total
        for k in grads:
            grads[k] = grads[k] * scale
        return True
    return False


def early_stop(val_curve: list[float], patience: int) -> bool:
    """True once the last ``patience`` epochs brought no improvement on the earlier best.

    Needs at least ``patience + 1`` epochs.
    """
    if patience < 1:
        raise ValueError("patience must be >= 1")
    if len(val_curve) < patience + 1:
        return False
    return min(val_curve[-patience:]) >= min(val_curve[:-patience])


def evaluate(model: ForecastModel, dataset: WindowedDataset, split: str) -> float:
    """Full-split MSE."""
    x, y = dataset.arrays(split)
    if len(y) == 0:
        raise ValueError(f"split {split!r} is empty")
    return loss(model, x, y)


def train_model(
    model: ForecastModel,
    dataset: WindowedDataset,
    config: TrainConfig = TrainConfig(),
    epoch_log: IO[str] | None = None,
    on_epoch: Callable[[int, ForecastModel], None] | None = None,
) -> TrainResult:
    """Train a private copy of ``model``; the result holds the best-validation weights.

    ``epoch_log``, when given, receives CSV rows ``epoch,train_loss,val_loss,wall_time_s``.
    ``on_epoch(epoch, model)`` sees the live weights after each completed epoch
    (it must not modify them).
    """
    xt, yt = dataset.arrays("train")
    xv, yv = dataset.arrays("validation")
    if len(yt) == 0 or len(yv) == 0:
        raise ValueError("training needs non-empty train and validation splits")
    if xt.shape[1] != model.seq_len:
        raise ValueError(f"dataset windows have length {xt.shape[1]}, model expects {model.seq_len}")

    model = model.copy()
    params = model.params()
    opt = Adam(config.learning_rate)
    rng = np.random.default_rng(config.seed)
    writer = csv.writer(epoch_log) if epoch_log is not None else None
    if writer:
        writer.writerow(["epoch", "train_loss", "val_loss", "wall_time_s"])

    train_curve: list[float] = []
    val_curve: list[float] = []
    best = (np.inf, 0, {k: v.copy() for k, v in params.items()})
    clipped = 0
    diverged = stopped = False
    rows = []
    t0 = time.perf_counter()
    n = len(yt)
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        total = 0.0
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            batch_loss, grads = loss_and_grads(model, xt[idx], yt[idx])
            if not np.isfinite(batch_loss):
                diverged = True
                break
            if clip_by_global_norm(grads, config.clip_norm):
                clipped += 1
            opt.step(params, grads)
            total += batch_loss * len(idx)
        if diverged:
            log.warning("non-finite training loss at epoch %d; aborting", epoch)
            break
        val = loss(model, xv, yv)
        if not np.isfinite(val):
            diverged = True
            log.warning("non-finite validation loss at epoch %d; aborting", epoch)
            break
        train_curve.append(total / n)
        val_curve.append(val)
        if val < best[0]:
            best = (val, epoch, {k: v.copy() for k, v in params.items()})
        row = (epoch, train_curve[-1], val, time.perf_counter() - t0)
        rows.append(row)
        if writer:
            writer.writerow(row)
        if on_epoch is not None:
            on_epoch(epoch, model)
        if early_stop(val_curve, config.patience):
            stopped = True
            break
    if clipped:
        log.info("gradient clipping triggered on %d steps", clipped)
    model.set_params(best[2])
    return TrainResult(
        epochs_run=len(val_curve),
        converged=stopped and not diverged,
        train_curve=train_curve,
        val_curve=val_curve,
        best_val_loss=float(best[0]) if val_curve else float("nan"),
        best_epoch=best[1],
        final_model=model,
        diverged=diverged,
        clipped_steps=clipped,
        log_rows=rows,
    )
