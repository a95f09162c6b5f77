"""Reference forecasters: persistence and a linear regression on an EMA bank.

The EMA-bank regression stands in for a long-memory benchmark: a power-law
kernel is well approximated by a handful of exponentials, so regressing on
EMAs at geometric timescales gives a cheap long-memory linear forecaster.
The rough-volatility figure itself is imported, never computed here.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .kernels import ExpSumKernel, geometric_timescales

REFERENCE_MSE = 0.288  # published rough-volatility test MSE, imported as-is
DEFAULT_TIMESCALES = geometric_timescales(5.0, 4, 1.0).timescales  # 5, 25, 125, 625 days


def persistence_forecast(window) -> float:
    w = np.asarray(window, dtype=float)
    if w.size == 0:
        raise ValueError("empty window")
    if w.ndim == 2:
        w = w[:, 0]
    return float(w[-1])


def persistence_batch(windows) -> np.ndarray:
    w = np.asarray(windows, dtype=float)
    return w[:, -1, 0] if w.ndim == 3 else w[:, -1]


def ema_features(windows, timescales: Sequence[float]) -> np.ndarray:
    """EMAs of each window at ``timescales`` (seeded with the first value) plus the last value."""
    w = np.asarray(windows, dtype=float)
    if w.ndim == 3:
        w = w[..., 0]
    cols = []
    for tau in timescales:
        lam = 1.0 / float(tau)
        if not 0.0 < lam <= 1.0:
            raise ValueError(f"timescale {tau} must be >= 1")
        e = w[:, 0].copy()
        for t in range(w.shape[1]):
            e = e * (1.0 - lam) + lam * w[:, t]
        cols.append(e)
    cols.append(w[:, -1])
    return np.column_stack(cols)


@dataclass
class LinearKernelForecaster:
    timescales: tuple[float, ...]
    coef: np.ndarray
    intercept: float
    fitted: bool = True

    def predict(self, windows) -> np.ndarray:
        return ema_features(windows, self.timescales) @ self.coef + self.intercept


def fit_linear_kernel(
    windows, targets, timescales: Sequence[float] | ExpSumKernel = DEFAULT_TIMESCALES,
    max_condition: float = 1e12,
) -> LinearKernelForecaster:
    """Ordinary least squares of targets on EMA features and the last value.

    Pass train-split samples only.
    """
    if isinstance(timescales, ExpSumKernel):
        timescales = timescales.timescales
    ts = tuple(float(t) for t in timescales)
    y = np.asarray(targets, dtype=float).reshape(-1)
    x = ema_features(windows, ts)
    design = np.column_stack([x, np.ones(len(y))])
    if len(y) < 10 * design.shape[1]:
        raise ValueError(f"{len(y)} samples for {design.shape[1]} features; need at least 10x as many")
    cond = np.linalg.cond(design)
    if not np.isfinite(cond) or cond > max_condition:
        raise np.linalg.LinAlgError(f"design matrix is rank deficient (condition number {cond:.3g})")
    beta, *_ = np.linalg.lstsq(design, y, rcond=None)
    return LinearKernelForecaster(ts, beta[:-1], float(beta[-1]))


def reference_mse(config: Mapping | None = None) -> float:
    """Externally reported benchmark MSE (default 0.288), for plotting only."""
    if config and config.get("reference_mse") is not None:
        return float(config["reference_mse"])
    return REFERENCE_MSE


def export_predictions(path: str | Path, symbols, dates, predictions, targets) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["symbol", "date", "prediction", "target"])
        for s, d, p, t in zip(symbols, dates, predictions, targets):
            w.writerow([s, str(d), repr(float(p)), repr(float(t))])
