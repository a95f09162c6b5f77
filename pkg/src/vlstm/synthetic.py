"""Synthetic long-memory series for tests, demos and desk-scale experiments."""

from __future__ import annotations

import numpy as np

from scipy.signal import lfilter

from .data import SplitDates, VolSeries, WindowedDataset


def business_days(start: str, n: int) -> np.ndarray:
    first = np.busday_offset(np.datetime64(start, "D"), 0, roll="forward")
    return np.busday_offset(first, np.arange(n), roll="forward")


def fractional_splits(dates: np.ndarray, train: float = 0.6, validation: float = 0.2) -> SplitDates:
    """Calendar boundaries that cut ``dates`` into train/validation/test fractions."""
    d = np.sort(np.asarray(dates, dtype="datetime64[D]"))
    n = len(d)
    i_tr = int(round(train * n)) - 1
    i_va = int(round((train + validation) * n)) - 1
    return SplitDates(str(d[0]), str(d[i_tr]), str(d[i_va]), str(d[-1]))


def ema_mixture_process(
    n: int,
    taus: tuple[float, ...] = (5.0, 100.0),
    weights: tuple[float, ...] = (0.5, 0.5),
    gain: float = 0.995,
    noise_var: float = 1.0,
    seed: int = 0,
    burn_in: int = 1000,
) -> np.ndarray:
    """``y[t+1] = gain * sum_k w_k EMA_k(y)[t] + eps``, ``eps ~ N(0, noise_var)``.

    ``EMA_k`` has smoothing ``1/tau_k`` and includes ``y[t]``; the noise variance
    is therefore the one-step irreducible error.
    """
    rng = np.random.default_rng(seed)
    lam = 1.0 / np.asarray(taus, dtype=float)
    w = np.asarray(weights, dtype=float)
    eps = rng.normal(0.0, np.sqrt(noise_var), size=n + burn_in)
    y = np.zeros(n + burn_in)
    e = np.zeros(len(lam))
    for t in range(n + burn_in - 1):
        e = e * (1.0 - lam) + lam * y[t]
        y[t + 1] = gain * float(w @ e) + eps[t + 1]
    return y[burn_in:]


def as_vol_series(log_vol: np.ndarray, symbol: str = "SYN", start: str = "2000-01-04") -> VolSeries:
    """Wrap a log-volatility path as realized variance on business days."""
    lv = np.asarray(log_vol, dtype=float)
    return VolSeries(symbol, business_days(start, len(lv)), np.exp(2.0 * lv))


def fgn(n: int, hurst: float, rng: np.random.Generator, size: int = 1) -> np.ndarray:
    """Fractional Gaussian noise (unit variance) by circulant embedding; shape ``(size, n)``."""
    if not 0 < hurst < 1:
        raise ValueError("hurst must lie in (0, 1)")
    k = np.arange(n + 1, dtype=float)
    gamma = 0.5 * ((k + 1) ** (2 * hurst) - 2 * k ** (2 * hurst) + np.abs(k - 1) ** (2 * hurst))
    row = np.concatenate([gamma, gamma[-2:0:-1]])
    eig = np.fft.fft(row).real
    if np.any(eig < -1e-10):
        raise ValueError("circulant embedding is not nonnegative definite")
    eig = np.clip(eig, 0.0, None)
    m = len(row)
    z = rng.standard_normal((size, m)) + 1j * rng.standard_normal((size, m))
    out = np.fft.fft(np.sqrt(eig / m) * z, axis=1)
    return out.real[:, :n]


def rough_vol_panel(
    n_symbols: int = 6,
    start: str = "2000-01-04",
    end: str = "2021-02-17",
    hurst: float = 0.14,
    vol_of_vol: float = 0.3,
    mean_reversion: float = 0.5,
    common: float = 0.7,
    seed: int = 0,
) -> list[VolSeries]:
    """Panel of cross-correlated rough log-volatility paths on business days.

    Each ``log sigma`` follows a fractional Ornstein-Uhlenbeck recursion in
    yearly units (252 business days) driven by fractional Gaussian noise that
    mixes a common and an idiosyncratic component.  Symbols get distinct
    long-run levels.  Realized variance is reported as ``sigma**2``.
    """
    rng = np.random.default_rng(seed)
    n = int(np.busday_count(np.datetime64(start, "D"), np.datetime64(end, "D") + 1))
    dates = business_days(start, n)
    dt_ = 1.0 / 252.0
    scale = vol_of_vol * dt_ ** hurst
    shared = fgn(n, hurst, rng)[0]
    own = fgn(n, hurst, rng, size=n_symbols)
    levels = np.log(0.15) + rng.normal(0.0, 0.25, size=n_symbols)
    out = []
    for s in range(n_symbols):
        noise = np.sqrt(common) * shared + np.sqrt(1.0 - common) * own[s]
        x = np.empty(n)
        x[0] = 0.0
        for t in range(1, n):
            x[t] = x[t - 1] - mean_reversion * dt_ * x[t - 1] + scale * noise[t]
        lv = levels[s] + x
        out.append(VolSeries(f"S{s:02d}", dates.copy(), np.exp(2.0 * lv)))
    return out


def ema_kernel_regression(
    n: int,
    taus: tuple[float, ...] = (5.0, 100.0),
    variance_shares: tuple[float, ...] = (0.5, 0.5),
    noise_var: float = 2.0,
    seed: int = 0,
    burn_in: int = 1000,
) -> tuple[np.ndarray, np.ndarray]:
    """Observed white-noise driver ``u`` and target ``y`` with ``E[y[t+1] | u[..t]]`` an EMA mixture.

    ``y[t+1] = sum_k a_k EMA_k(u)[t] / sd_k + eps[t+1]`` where ``sd_k`` is the
    stationary EMA standard deviation and ``a_k**2`` the variance share, and
    ``eps ~ N(0, noise_var)``.  Returns ``(u, y)`` aligned so that ``y[t]``
    is the target following input ``u[t-1]``; ``y[0]`` is undefined (NaN).
    """
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(n + burn_in)
    mean = np.zeros_like(u)
    for tau, share in zip(taus, variance_shares):
        lam = 1.0 / tau
        e = lfilter([lam], [1.0, -(1.0 - lam)], u)
        mean += np.sqrt(share) * e / np.sqrt(lam / (2.0 - lam))
    y = np.full_like(u, np.nan)
    y[1:] = mean[:-1] + rng.normal(0.0, np.sqrt(noise_var), size=len(u) - 1)
    return u[burn_in:], y[burn_in:]


def sequence_dataset(inputs: np.ndarray, targets: np.ndarray, seq_len: int,
                     fractions: tuple[float, float] = (0.6, 0.2)) -> WindowedDataset:
    """Windows ``inputs[j-seq_len:j]`` with target ``targets[j]``, split chronologically."""
    x = np.asarray(inputs, dtype=float)
    y = np.asarray(targets, dtype=float)
    idx = np.arange(seq_len, len(x))
    view = np.lib.stride_tricks.sliding_window_view(x, seq_len)
    windows = np.ascontiguousarray(view[idx - seq_len][:, :, None])
    n = len(idx)
    n_tr = int(round(fractions[0] * n))
    n_va = int(round(sum(fractions) * n))
    split = np.array(["train"] * n_tr + ["validation"] * (n_va - n_tr) + ["test"] * (n - n_va), dtype=object)
    dates = business_days("2000-01-04", len(x))[idx]
    return WindowedDataset(windows, y[idx], split, np.full(n, "SYN", dtype=object), dates, seq_len)
