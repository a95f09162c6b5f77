"""Exponential moving averages and sum-of-exponentials power-law kernels."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linprog, minimize, minimize_scalar

log = logging.getLogger(__name__)

POINTS_PER_DECADE = 64
SEARCH_POINTS_PER_DECADE = 16


def ema(series: Sequence[float], lam: float, init: float = 0.0) -> np.ndarray:
    """``out[t] = (1 - lam) * out[t-1] + lam * series[t]`` with ``out[-1] = init``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    x = np.asarray(series, dtype=np.float64)
    out = np.empty_like(x)
    prev = float(init)
    keep = 1.0 - lam
    for t, v in enumerate(x):
        prev = prev * keep + lam * v
        out[t] = prev
    return out


@dataclass(frozen=True)
class ExpSumKernel:
    """``K(x) = sum_i w_i exp(-x / tau_i)`` approximating ``x**-alpha`` on ``valid_range``.

    Weights sum to one, so ``K(0) == 1``; any overall amplitude belongs to the
    caller.
    """

    weights: tuple[float, ...]
    timescales: tuple[float, ...]
    alpha: float
    valid_range: tuple[float, float]

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=float)
        tau = np.asarray(self.timescales, dtype=float)
        if w.ndim != 1 or len(w) < 1 or len(w) != len(tau):
            raise ValueError("need as many weights as timescales, at least one")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")
        if np.any(tau <= 0) or np.any(np.diff(tau) <= 0):
            raise ValueError("timescales must be positive and strictly increasing")
        lo, hi = self.valid_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad valid range {self.valid_range}")

    @property
    def n(self) -> int:
        return len(self.weights)


def _normalized(w: np.ndarray) -> tuple[float, ...]:
    w = np.asarray(w, dtype=float)
    w = w / w.sum()
    # absorb the rounding residue so the sum is 1 to the last ulp or two
    w[np.argmax(w)] += 1.0 - w.sum()
    return tuple(float(v) for v in w)


def geometric_timescales(
    c: float, n: int, alpha: float, valid_range: tuple[float, float] | None = None
) -> ExpSumKernel:
    """Naive power-law cover: ``tau_i = c**i`` and ``w_i ~ c**(-alpha*i)`` for ``i = 1..n``."""
    if c <= 1:
        raise ValueError(f"c must exceed 1, got {c}")
    if n < 1 or alpha <= 0:
        raise ValueError("need n >= 1 and alpha > 0")
    i = np.arange(1, n + 1)
    tau = float(c) ** i
    w = (1.0 / float(c) ** alpha) ** i
    rng = valid_range if valid_range is not None else (1.0, float(tau[-1]))
    return ExpSumKernel(_normalized(w), tuple(float(t) for t in tau), float(alpha), rng)


def eval_kernel(k: ExpSumKernel, x) -> np.ndarray | float:
    xa = np.asarray(x, dtype=np.float64)
    if np.any(xa < 0):
        raise ValueError("kernel argument must be >= 0")
    w = np.asarray(k.weights)
    tau = np.asarray(k.timescales)
    out = np.exp(-xa[..., None] / tau) @ w
    return float(out) if np.ndim(x) == 0 else out


def log_grid(x_lo: float, x_hi: float, per_decade: int = POINTS_PER_DECADE) -> np.ndarray:
    decades = np.log10(x_hi / x_lo)
    npts = max(int(np.ceil(decades * per_decade)) + 1, 2)
    return np.geomspace(x_lo, x_hi, npts)


def _sup_rel_error(w, tau, alpha, grid) -> float:
    basis = np.exp(-grid[:, None] / tau)
    khat = basis @ w
    if khat[0] <= 0:
        return np.inf
    khat = khat / khat[0]
    target = (grid / grid[0]) ** (-alpha)
    return float(np.max(np.abs(khat - target) / target))


def approx_error(k: ExpSumKernel, alpha: float | None = None) -> float:
    """Sup relative error against ``(x/x_lo)**-alpha`` on the standard log grid.

    The kernel is rescaled to agree with the target at ``x_lo`` first.
    """
    a = k.alpha if alpha is None else alpha
    grid = log_grid(*k.valid_range)
    return _sup_rel_error(np.asarray(k.weights), np.asarray(k.timescales), a, grid)


def _minimax_weights(tau, alpha, grid):
    """Nonnegative weights minimising the sup relative error for fixed timescales.

    Linear program in ``(w, t)``: minimise ``t`` subject to
    ``|K(x)/x**-alpha - 1| <= t`` on the grid and ``K(x_lo)`` equal to the target.
    """
    target = (grid / grid[0]) ** (-alpha)
    a = np.exp(-grid[:, None] / tau) / target[:, None]
    n = len(tau)
    ones = np.ones((len(grid), 1))
    a_ub = np.vstack([np.hstack([a, -ones]), np.hstack([-a, -ones])])
    b_ub = np.concatenate([np.ones(len(grid)), -np.ones(len(grid))])
    a_eq = np.hstack([a[:1], [[0.0]]])
    c = np.zeros(n + 1)
    c[-1] = 1.0
    res = linprog(c, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=[1.0], bounds=[(0, None)] * (n + 1), method="highs")
    if res.status != 0:
        return None, np.inf
    w = np.clip(res.x[:n], 0.0, None)
    if not np.any(w > 0):
        return None, np.inf
    return w, _sup_rel_error(w, tau, alpha, grid)


def _refine(log_tau, alpha, grid, bounds, sweeps):
    """Coordinate sweeps over log-timescales, then a Nelder-Mead polish.

    Coordinate moves alone stall at the kinks of a minimax objective; the
    simplex polish gets past them.
    """
    err = _minimax_weights(np.exp(log_tau), alpha, grid)[1]
    for _ in range(sweeps):
        for j in range(len(log_tau)):
            def obj(v, j=j):
                lt = log_tau.copy()
                lt[j] = v
                return _minimax_weights(np.exp(lt), alpha, grid)[1]

            res = minimize_scalar(obj, bounds=bounds, method="bounded", options={"xatol": 1e-3})
            if res.fun < err:
                log_tau[j], err = res.x, res.fun

    def obj_all(lt):
        lt = np.clip(lt, *bounds)
        return _minimax_weights(np.exp(np.sort(lt)), alpha, grid)[1]

    res = minimize(obj_all, log_tau, method="Nelder-Mead",
                   options={"xatol": 1e-3, "fatol": 1e-6, "maxiter": 150 * len(log_tau)})
    if res.fun < err:
        log_tau = np.sort(np.clip(res.x, *bounds))
    return log_tau


class ExpSumFitError(RuntimeError):
    def __init__(self, message: str, best: ExpSumKernel | None, error: float):
        super().__init__(message)
        self.best = best
        self.error = error


def _fit_raw(alpha, x_lo, x_hi, n, sweeps):
    """Best log-timescales for ``n`` terms and their full-grid error."""
    grid = log_grid(x_lo, x_hi)
    coarse = log_grid(x_lo, x_hi, SEARCH_POINTS_PER_DECADE)
    bounds = (np.log(x_lo) - 3.0, np.log(x_hi) + 3.0)
    if n == 1:
        starts = [np.array([np.log(x_hi)]), np.array([np.log(x_lo)])]
        candidates = []
    else:
        starts = [np.linspace(np.log(x_lo), np.log(x_hi), n)]
        prev, _ = _fit_raw(alpha, x_lo, x_hi, n - 1, sweeps)
        # the extra column may take zero weight, so this start is never worse than n-1
        warm = np.sort(np.append(prev, bounds[1]))
        starts.append(warm)
        candidates = [warm]
    candidates += [_refine(s.copy(), alpha, coarse, bounds, sweeps) for s in starts]
    scored = [(_minimax_weights(np.exp(c), alpha, grid)[1], i) for i, c in enumerate(candidates)]
    err, i = min(scored)
    return candidates[i], err


def fit_exp_sum(
    alpha: float,
    x_lo: float,
    x_hi: float,
    n: int,
    sweeps: int = 1,
    max_error: float | None = None,
) -> ExpSumKernel:
    """Fit ``n`` exponentials to ``x**-alpha`` over ``[x_lo, x_hi]`` in sup relative error.

    Timescales start on a geometric grid spanning the range (and, for
    ``n > 1``, from the ``n - 1`` solution plus one slow scale); weights are
    the exact minimax solution for the current timescales; ``sweeps`` rounds
    of coordinate refinement move each log-timescale in turn before a simplex
    polish.  The search runs on a coarser grid, candidates are scored on the
    full one.  Deterministic, and the error never increases with ``n``.  If
    ``max_error`` is given and not reached, :class:`ExpSumFitError` carries
    the best kernel found.
    """
    if not 0 < alpha < 2:
        raise ValueError(f"alpha must lie in (0, 2), got {alpha}")
    if not 0 < x_lo < x_hi:
        raise ValueError(f"need 0 < x_lo < x_hi, got [{x_lo}, {x_hi}]")
    if n < 1:
        raise ValueError("need n >= 1")
    log_tau, _ = _fit_raw(alpha, x_lo, x_hi, n, sweeps)
    w, _ = _minimax_weights(np.exp(log_tau), alpha, log_grid(x_lo, x_hi))

    order = np.argsort(log_tau)
    tau, w = np.exp(log_tau[order]), w[order]
    keep = w > 0
    if not np.all(keep):
        log.debug("dropping %d zero-weight exponentials", int((~keep).sum()))
        tau, w = tau[keep], w[keep]
    # merge numerically coincident timescales so they stay strictly increasing
    uniq_tau, uniq_w = [tau[0]], [w[0]]
    for t, v in zip(tau[1:], w[1:]):
        if t <= uniq_tau[-1] * (1 + 1e-12):
            uniq_w[-1] += v
        else:
            uniq_tau.append(t)
            uniq_w.append(v)
    kernel = ExpSumKernel(_normalized(uniq_w), tuple(float(t) for t in uniq_tau), float(alpha), (float(x_lo), float(x_hi)))
    final = approx_error(kernel)
    if not np.isfinite(final):
        raise ExpSumFitError("fit produced a non-finite error", kernel, final)
    if max_error is not None and final > max_error:
        raise ExpSumFitError(f"sup relative error {final:.4g} exceeds {max_error}", kernel, final)
    return kernel
