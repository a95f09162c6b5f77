"""Realized-variance ingestion, log-volatility windows and calendar splits.

Input CSV: header ``date,symbol,rv`` (ISO dates, realized variance), with an
optional ``ret`` column of daily log returns.  Rows with missing or
nonpositive ``rv`` are dropped and counted per symbol.

Split membership is decided by the *target* date: an input window may reach
back into an earlier split, a target never leaves its own.
"""

from __future__ import annotations

import csv
import datetime as dt
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")


class DataError(ValueError):
    pass


@dataclass
class VolSeries:
    symbol: str
    dates: np.ndarray  # datetime64[D], strictly increasing
    rv: np.ndarray
    ret: np.ndarray | None = None
    dropped: int = 0

    def __len__(self) -> int:
        return len(self.dates)


def _parse_date(text: str) -> np.datetime64:
    return np.datetime64(dt.date.fromisoformat(text.strip()), "D")


def load_csv(path: str | Path) -> list[VolSeries]:
    """One :class:`VolSeries` per symbol (sorted by symbol), each sorted by date."""
    path = Path(path)
    rows: dict[str, list] = {}
    dropped: dict[str, int] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        for col in ("date", "symbol", "rv"):
            if col not in header:
                raise DataError(f"{path}:1: missing column {col!r} in header {header}")
        di, si, ri = header.index("date"), header.index("symbol"), header.index("rv")
        ti = header.index("ret") if "ret" in header else None
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                date = _parse_date(row[di])
                sym = row[si].strip()
                if not sym:
                    raise ValueError("empty symbol")
                rv_txt = row[ri].strip() if ri < len(row) else ""
                ret = None
                if ti is not None and ti < len(row) and row[ti].strip():
                    ret = float(row[ti])
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}:{lineno}: cannot parse row {row!r}: {exc}") from None
            try:
                rv = float(rv_txt) if rv_txt else float("nan")
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad rv value {rv_txt!r}") from None
            if not np.isfinite(rv) or rv <= 0 or (ti is not None and ret is None):
                dropped[sym] = dropped.get(sym, 0) + 1
                rows.setdefault(sym, [])
                continue
            rows.setdefault(sym, []).append((date, rv, ret, lineno))

    out = []
    for sym in sorted(rows):
        recs = sorted(rows[sym], key=lambda r: r[0])
        if not recs:
            log.warning("symbol %s has no valid rows", sym)
            continue
        dates = np.array([r[0] for r in recs], dtype="datetime64[D]")
        dup = np.nonzero(np.diff(dates) == np.timedelta64(0, "D"))[0]
        if len(dup):
            r = recs[dup[0] + 1]
            raise DataError(f"{path}:{r[3]}: duplicate date {r[0]} for symbol {sym}")
        ret = np.array([r[2] for r in recs], dtype=float) if ti is not None else None
        out.append(VolSeries(sym, dates, np.array([r[1] for r in recs]), ret, dropped.get(sym, 0)))
    if not out:
        raise DataError(f"{path}: no usable rows")
    n_drop = sum(dropped.values())
    if n_drop:
        log.info("dropped %d rows with missing or nonpositive rv", n_drop)
    return out


def write_csv(path: str | Path, series: list[VolSeries]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        has_ret = any(s.ret is not None for s in series)
        w.writerow(["date", "symbol", "rv"] + (["ret"] if has_ret else []))
        for s in series:
            for k in range(len(s)):
                row = [str(s.dates[k]), s.symbol, repr(float(s.rv[k]))]
                if has_ret:
                    row.append(repr(float(s.ret[k])))
                w.writerow(row)


def to_log_vol(series: VolSeries | np.ndarray) -> np.ndarray:
    """``log sigma = 0.5 * ln(rv)``."""
    rv = series.rv if isinstance(series, VolSeries) else np.asarray(series, dtype=float)
    if np.any(~(rv > 0)):
        raise DataError("realized variance must be strictly positive")
    return 0.5 * np.log(rv)


@dataclass(frozen=True)
class SplitDates:
    """Inclusive calendar boundaries; defaults are the Oxford-Man panel dates."""

    train_start: str = "2000-01-04"
    train_end: str = "2012-09-06"
    val_end: str = "2016-11-23"
    test_end: str = "2021-02-17"

    def __post_init__(self) -> None:
        b = [np.datetime64(d, "D") for d in (self.train_start, self.train_end, self.val_end, self.test_end)]
        if not (b[0] <= b[1] < b[2] < b[3]):
            raise DataError(f"split boundaries must increase: {self}")

    def bounds(self) -> tuple[np.datetime64, ...]:
        return tuple(np.datetime64(d, "D") for d in (self.train_start, self.train_end, self.val_end, self.test_end))


def split_by_dates(dates, splits: SplitDates = SplitDates()) -> np.ndarray:
    """Split tag per date: ``"train"``, ``"validation"``, ``"test"`` or ``""`` (outside)."""
    d = np.asarray(dates, dtype="datetime64[D]")
    start, tr, va, te = splits.bounds()
    tags = np.full(d.shape, "", dtype=object)
    tags[(d >= start) & (d <= tr)] = "train"
    tags[(d > tr) & (d <= va)] = "validation"
    tags[(d > va) & (d <= te)] = "test"
    return tags


@dataclass
class WindowedDataset:
    """Windows of length ``seq_len`` with next-step targets, tagged by split.

    ``windows`` is ``(N, seq_len, n_features)``; samples are ordered by
    (symbol, target date).
    """

    windows: np.ndarray
    targets: np.ndarray
    split: np.ndarray
    symbols: np.ndarray
    dates: np.ndarray  # target dates
    seq_len: int
    mean: float = 0.0
    std: float = 1.0
    standardized: bool = False
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.targets)

    def mask(self, name: str) -> np.ndarray:
        if name not in SPLITS:
            raise DataError(f"unknown split {name!r}")
        return self.split == name

    def arrays(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        m = self.mask(name)
        return self.windows[m], self.targets[m]

    def count(self, name: str) -> int:
        return int(self.mask(name).sum())

    def destandardize(self, values) -> np.ndarray:
        return np.asarray(values, dtype=float) * self.std + self.mean


def make_windows(
    series: list[VolSeries],
    seq_len: int,
    splits: SplitDates = SplitDates(),
    include_returns: bool = False,
) -> WindowedDataset:
    """Sliding log-volatility windows over consecutive retained observations.

    The sample whose target sits at index ``j`` uses values ``j-seq_len..j-1``
    and belongs to the split containing date ``j``; targets outside every
    split are skipped.  Symbols shorter than ``seq_len + 1`` contribute nothing.
    """
    if seq_len < 1:
        raise DataError("seq_len must be >= 1")
    wins, tgts, tags, syms, dates = [], [], [], [], []
    for s in series:
        lv = to_log_vol(s)
        if len(lv) < seq_len + 1:
            log.warning("symbol %s has %d points, fewer than seq_len+1=%d; skipped", s.symbol, len(lv), seq_len + 1)
            continue
        feats = lv[:, None]
        if include_returns:
            if s.ret is None:
                raise DataError(f"symbol {s.symbol} has no return column")
            feats = np.column_stack([lv, s.ret])
        t = split_by_dates(s.dates, splits)
        idx = np.arange(seq_len, len(lv))
        idx = idx[t[idx] != ""]
        if len(idx) == 0:
            continue
        view = np.lib.stride_tricks.sliding_window_view(feats, seq_len, axis=0)  # (L-T+1, F, T)
        wins.append(np.transpose(view[idx - seq_len], (0, 2, 1)))
        tgts.append(lv[idx])
        tags.append(t[idx])
        syms.append(np.full(len(idx), s.symbol, dtype=object))
        dates.append(s.dates[idx])
    nfeat = 2 if include_returns else 1
    if not wins:
        return WindowedDataset(np.zeros((0, seq_len, nfeat)), np.zeros(0), np.zeros(0, dtype=object),
                               np.zeros(0, dtype=object), np.zeros(0, dtype="datetime64[D]"), seq_len)
    return WindowedDataset(
        np.ascontiguousarray(np.concatenate(wins)), np.concatenate(tgts), np.concatenate(tags),
        np.concatenate(syms), np.concatenate(dates), seq_len,
    )


def standardize(ds: WindowedDataset) -> WindowedDataset:
    """Scale log volatility by train-target mean and population std.

    Only the log-volatility feature (column 0) is transformed; returns, when
    present, are left alone.
    """
    train = ds.mask("train")
    if not train.any():
        raise DataError("cannot standardize without train samples")
    mean = float(np.mean(ds.targets[train]))
    std = float(np.std(ds.targets[train]))
    if not std > 0:
        raise DataError("train targets have zero standard deviation")
    w = ds.windows.copy()
    w[..., 0] = (w[..., 0] - mean) / std
    return WindowedDataset(w, (ds.targets - mean) / std, ds.split, ds.symbols, ds.dates, ds.seq_len,
                           mean, std, True, dict(ds.meta))


def export_csv(ds: WindowedDataset, path: str | Path) -> None:
    """Audit dump: ``symbol,date,split,target,x0..x{T-1}`` (first feature only)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["symbol", "date", "split", "target"] + [f"x{i}" for i in range(ds.seq_len)])
        for k in range(len(ds)):
            w.writerow([ds.symbols[k], str(ds.dates[k]), ds.split[k], repr(float(ds.targets[k]))]
                       + [repr(float(v)) for v in ds.windows[k, :, 0]])


def load_dataset(path: str | Path, seq_len: int, splits: SplitDates = SplitDates(),
                 include_returns: bool = False) -> WindowedDataset:
    return standardize(make_windows(load_csv(path), seq_len, splits, include_returns))
