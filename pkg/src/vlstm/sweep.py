"""Experiment grid runner, model selection and summary tables.

Runs are appended to a JSON-lines log (one :class:`RunRecord` per line) as
they finish, so an interrupted sweep resumes where it stopped.  Selection and
summaries are pure functions of the completed log.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import os
import time
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import SplitDates, VolSeries, make_windows, standardize
from .model import build_model, save_model
from .train import TrainConfig, evaluate, train_model

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
QUANTILE_PROBS = tuple(k / 10 for k in range(1, 10))
GAP_TIE_RTOL = 1e-9
MIN_SELECTION_SIZE = 10
GROUP_KEYS = ("architecture", "bias", "n_hidden", "seq_len")


@dataclass(frozen=True)
class ArchSpec:
    kind: str
    n_scales: int = 1
    coupling: str = "independent"

    @property
    def label(self) -> str:
        if self.kind == "lstm":
            return "LSTM"
        if self.kind == "msgru":
            return "msGRU" if self.n_scales == 2 else f"msGRU(n={self.n_scales})"
        if self.n_scales == 2 and self.coupling == "independent":
            return "VLSTM"
        tail = ",tied" if self.coupling == "tied" else ""
        return f"VLSTM(n={self.n_scales}{tail})"

    @classmethod
    def parse(cls, text: str) -> "ArchSpec":
        """``lstm``, ``vlstm``, ``vlstm:3``, ``vlstm:2:tied``, ``msgru:2``."""
        parts = text.lower().split(":")
        kind = parts[0]
        n = int(parts[1]) if len(parts) > 1 else (1 if kind == "lstm" else 2)
        coupling = parts[2] if len(parts) > 2 else "independent"
        return cls(kind, n, coupling)


@dataclass
class GridSpec:
    archs: list[ArchSpec] = field(default_factory=lambda: [ArchSpec("lstm"), ArchSpec("vlstm", 2)])
    bias: list[bool] = field(default_factory=lambda: [True, False])
    n_hidden: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    seq_len: list[int] = field(default_factory=lambda: list(range(10, 101, 15)))
    seeds: list[int] = field(default_factory=lambda: list(range(20)))

    def hyperparameters(self) -> list[tuple[bool, int, int]]:
        return list(itertools.product(self.bias, self.n_hidden, self.seq_len))

    def tasks(self) -> list[dict]:
        out = []
        for arch in self.archs:
            for bias, nh, tseq in self.hyperparameters():
                for seed in self.seeds:
                    out.append({"kind": arch.kind, "n_scales": arch.n_scales, "coupling": arch.coupling,
                                "architecture": arch.label, "bias": bias, "n_hidden": nh,
                                "seq_len": tseq, "seed": seed})
        return out


@dataclass
class RunRecord:
    architecture: str
    kind: str
    bias: bool
    coupling: str
    n_scales: int
    n_hidden: int
    seq_len: int
    seed: int
    val_loss: float | None
    test_loss: float | None
    epochs_run: int
    converged: bool
    best_epoch: int = 0
    target_std: float | None = None
    base_seed: int = 0
    wall_time_s: float = 0.0
    archive: str | None = None
    error: str | None = None
    schema: int = SCHEMA_VERSION

    @property
    def run_id(self) -> str:
        return run_id(asdict(self))

    def to_json(self, drop: Sequence[str] = ()) -> str:
        d = asdict(self)
        for k in drop:
            d.pop(k, None)
        return json.dumps(d, sort_keys=True, allow_nan=False)

    @classmethod
    def from_json(cls, line: str) -> "RunRecord":
        d = json.loads(line)
        if d.get("schema", 0) > SCHEMA_VERSION:
            raise ValueError(f"run record schema {d['schema']} is newer than {SCHEMA_VERSION}")
        return cls(**d)


def run_id(d: dict) -> str:
    b = "bias" if d["bias"] else "nobias"
    return f"{d['kind']}-n{d['n_scales']}-{d['coupling']}-{b}-h{d['n_hidden']}-t{d['seq_len']}-s{d['seed']}"


def derive_seeds(base_seed: int, seed: int) -> tuple[int, int]:
    """(init seed, shuffle seed) for one run; independent of architecture and order."""
    a, b = np.random.SeedSequence([base_seed, seed]).generate_state(2)
    return int(a), int(b)


def _finite_or_none(x: float) -> float | None:
    return float(x) if x is not None and math.isfinite(x) else None


# -- running ---------------------------------------------------------------------

_DATASETS: dict = {}


def _dataset_for(series, splits, seq_len):
    key = (id(series), splits, seq_len)
    if key not in _DATASETS:
        _DATASETS.clear()
        _DATASETS[key] = standardize(make_windows(series, seq_len, splits))
    return _DATASETS[key]


def run_one(task: dict, series: list[VolSeries], splits: SplitDates, config: TrainConfig,
            out_dir: str | Path | None = None, base_seed: int = 0) -> RunRecord:
    """Train and evaluate one grid cell/seed; failures become unconverged records."""
    t0 = time.perf_counter()
    init_seed, shuffle_seed = derive_seeds(base_seed, task["seed"])
    common = dict(architecture=task["architecture"], kind=task["kind"], bias=task["bias"],
                  coupling=task["coupling"], n_scales=task["n_scales"], n_hidden=task["n_hidden"],
                  seq_len=task["seq_len"], seed=task["seed"], base_seed=base_seed)
    try:
        ds = _dataset_for(series, splits, task["seq_len"])
        model = build_model(task["kind"], task["n_hidden"], task["seq_len"], task["n_scales"],
                            task["bias"], task["coupling"], n_in=ds.windows.shape[2], seed=init_seed)
        cfg = TrainConfig(**{**asdict(config), "seed": shuffle_seed})
        log_fh = None
        archive = None
        if out_dir is not None:
            rid = run_id(common)
            (Path(out_dir) / "epochs").mkdir(parents=True, exist_ok=True)
            log_fh = open(Path(out_dir) / "epochs" / f"{rid}.csv", "w", newline="")
        try:
            res = train_model(model, ds, cfg, epoch_log=log_fh)
        finally:
            if log_fh:
                log_fh.close()
        test = evaluate(res.final_model, ds, "test") if ds.count("test") else float("nan")
        if out_dir is not None:
            (Path(out_dir) / "models").mkdir(parents=True, exist_ok=True)
            archive = str(Path("models") / f"{run_id(common)}.npz")
            save_model(Path(out_dir) / archive, res.final_model,
                       {"target_mean": ds.mean, "target_std": ds.std})
        return RunRecord(**common, val_loss=_finite_or_none(res.best_val_loss),
                         test_loss=_finite_or_none(test), epochs_run=res.epochs_run,
                         converged=res.converged, best_epoch=res.best_epoch, target_std=ds.std,
                         wall_time_s=time.perf_counter() - t0, archive=archive,
                         error="diverged" if res.diverged else None)
    except Exception as exc:  # one bad run must not sink the grid
        log.exception("run %s failed", run_id(common))
        return RunRecord(**common, val_loss=None, test_loss=None, epochs_run=0, converged=False,
                         wall_time_s=time.perf_counter() - t0, error=f"{type(exc).__name__}: {exc}")


def read_log(path: str | Path) -> list[RunRecord]:
    path = Path(path)
    if not path.exists():
        return []
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(RunRecord.from_json(line))
    return out


def _append(path: Path, rec: RunRecord) -> None:
    with open(path, "a") as fh:
        fh.write(rec.to_json() + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def run_grid(
    grid: GridSpec,
    series: list[VolSeries],
    splits: SplitDates,
    config: TrainConfig,
    out_dir: str | Path,
    parallelism: int = 1,
    base_seed: int = 0,
) -> list[RunRecord]:
    """Run every task in ``grid`` not already present in ``out_dir/runs.jsonl``.

    Returns all records for the grid (old and new), in grid order.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "runs.jsonl"
    tasks = grid.tasks()
    if not tasks:
        raise ValueError("empty grid")
    done = {r.run_id: r for r in read_log(log_path)}
    todo = [t for t in tasks if run_id(t) not in done]
    log.info("%d tasks, %d already done", len(tasks), len(tasks) - len(todo))
    if parallelism <= 1:
        for task in todo:
            rec = run_one(task, series, splits, config, out_dir, base_seed)
            _append(log_path, rec)
            done[rec.run_id] = rec
    else:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            futs = [pool.submit(run_one, t, series, splits, config, out_dir, base_seed) for t in todo]
            for fut in as_completed(futs):
                rec = fut.result()
                _append(log_path, rec)  # only the parent writes, so appends never interleave
                done[rec.run_id] = rec
    return [done[run_id(t)] for t in tasks]


# -- selection ---------------------------------------------------------------------

@dataclass
class SelectionResult:
    threshold: float
    selected: list[int]
    quantiles: list[float]
    max_gap_index: int
    probs: tuple[float, ...] = QUANTILE_PROBS


def decile_quantiles(values) -> np.ndarray:
    """q(0.1)..q(0.9) by linear interpolation at positions ``(N-1)p`` of the sorted sample."""
    x = np.sort(np.asarray(values, dtype=float))
    n = len(x)
    h = np.array([(n - 1) * k / 10 for k in range(1, 10)])
    lo = np.floor(h).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    return x[lo] + (h - lo) * (x[hi] - x[lo])


def quantile_gap_select(val_losses) -> SelectionResult:
    """Keep the low mode of a (possibly bimodal) loss sample.

    The threshold is the decile at the lower edge of the widest gap between
    consecutive deciles; near-equal widest gaps resolve towards larger p.
    """
    v = np.asarray(val_losses, dtype=float)
    if len(v) < MIN_SELECTION_SIZE:
        raise ValueError(f"need at least {MIN_SELECTION_SIZE} losses, got {len(v)}")
    if not np.all(np.isfinite(v)):
        raise ValueError("losses must be finite")
    q = decile_quantiles(v)
    gaps = np.diff(q)
    top = gaps.max()
    j = int(np.nonzero(gaps >= top - GAP_TIE_RTOL * abs(top))[0][-1])
    thr = float(q[j])
    sel = [int(i) for i in np.nonzero(v <= thr)[0]]
    return SelectionResult(thr, sel, [float(x) for x in q], j)


def below_mean_select(val_losses) -> SelectionResult:
    v = np.asarray(val_losses, dtype=float)
    thr = float(np.mean(v))
    return SelectionResult(thr, [int(i) for i in np.nonzero(v <= thr)[0]], [], -1, ())


def group_records(records: Iterable[RunRecord], keys: Sequence[str] = GROUP_KEYS) -> dict[tuple, list[RunRecord]]:
    groups: dict[tuple, list[RunRecord]] = defaultdict(list)
    for r in records:
        groups[tuple(getattr(r, k) for k in keys)].append(r)
    return dict(sorted(groups.items(), key=lambda kv: repr(kv[0])))


@dataclass
class Selection:
    method: str
    keys: tuple[str, ...]
    selected: dict[tuple, list[RunRecord]]
    results: dict[tuple, SelectionResult]
    fallback: list[tuple]  # groups too small for quantile-gap selection, kept whole

    def records(self) -> list[RunRecord]:
        return [r for recs in self.selected.values() for r in recs]


def select_records(records: Iterable[RunRecord], method: str = "quantile_gap",
                   keys: Sequence[str] = GROUP_KEYS) -> Selection:
    """Per-group selection of the "better" runs on validation loss.

    ``method`` is ``quantile_gap`` (default), ``below_mean`` or ``all``.  Runs
    without a finite validation loss are never selected.  A group with fewer
    than ten usable runs cannot be split by deciles and is kept whole; its key
    is listed in ``fallback``.
    """
    if method not in ("quantile_gap", "below_mean", "all"):
        raise ValueError(f"unknown selection method {method!r}")
    selected, results, fallback = {}, {}, []
    for key, recs in group_records(records, keys).items():
        usable = sorted((r for r in recs if r.val_loss is not None), key=lambda r: r.seed)
        if not usable:
            continue
        losses = [r.val_loss for r in usable]
        if method == "all":
            selected[key] = usable
            continue
        if method == "quantile_gap" and len(usable) < MIN_SELECTION_SIZE:
            fallback.append(key)
            selected[key] = usable
            continue
        res = quantile_gap_select(losses) if method == "quantile_gap" else below_mean_select(losses)
        results[key] = res
        selected[key] = [usable[i] for i in res.selected]
    if fallback:
        log.warning("%d groups have fewer than %d runs; kept whole", len(fallback), MIN_SELECTION_SIZE)
    return Selection(method, tuple(keys), selected, results, fallback)


def best_by_validation(records: Iterable[RunRecord], keys: Sequence[str] = GROUP_KEYS) -> dict[tuple, RunRecord]:
    """Lowest validation loss per group, ties to the lower seed."""
    out = {}
    for key, recs in group_records(records, keys).items():
        usable = [r for r in recs if r.val_loss is not None]
        if usable:
            out[key] = min(usable, key=lambda r: (r.val_loss, r.seed))
    return out


# -- summaries ---------------------------------------------------------------------

def mean_std(values) -> tuple[float, float]:
    """Mean and population standard deviation, two-pass."""
    v = np.asarray(list(values), dtype=float)
    if len(v) == 0:
        return float("nan"), float("nan")
    m = float(np.sum(v) / len(v))
    return m, float(np.sqrt(np.sum((v - m) ** 2) / len(v)))


def _sort_key(r: RunRecord):
    return (r.architecture, not r.bias, r.n_hidden, r.seq_len, r.seed)


def summarize(records: Iterable[RunRecord], selection: Selection) -> dict[str, list[dict]]:
    """Table-style summaries over the selected runs.

    ``table``: mean/std test loss per (architecture, bias) across all N_h and
    T_seq; ``by_n_hidden`` and ``by_seq_len``: the same sliced by one
    hyperparameter.  Cells with no selected run are reported with ``n == 0``
    and missing statistics rather than zeros.
    """
    records = sorted(records, key=_sort_key)
    chosen = {id(r) for r in selection.records()}
    sel = [r for r in records if id(r) in chosen and r.test_loss is not None]

    def block(extra: tuple[str, ...]):
        cells = sorted({(r.architecture, r.bias) + tuple(getattr(r, k) for k in extra) for r in records},
                       key=lambda c: (c[0], not c[1]) + c[2:])
        rows = []
        for cell in cells:
            vals = [r.test_loss for r in sel
                    if (r.architecture, r.bias) + tuple(getattr(r, k) for k in extra) == cell]
            m, s = mean_std(vals)
            row = {"architecture": cell[0], "bias": cell[1]}
            row.update(dict(zip(extra, cell[2:])))
            row.update({"n": len(vals), "test_mean": m if vals else None, "test_std": s if vals else None})
            rows.append(row)
        return rows

    return {"table": block(()), "by_n_hidden": block(("n_hidden",)), "by_seq_len": block(("seq_len",))}


def convergence_ecdf(records: Iterable[RunRecord], max_epochs: int) -> dict[tuple[str, bool], list[tuple[int, float]]]:
    """Per (architecture, bias): sorted ``(epochs, fraction <= epochs)`` steps.

    Runs that never met the stopping rule count as ``max_epochs``.
    """
    by: dict[tuple[str, bool], list[int]] = defaultdict(list)
    for r in records:
        by[(r.architecture, r.bias)].append(r.epochs_run if r.converged else max_epochs)
    out = {}
    for key in sorted(by, key=lambda k: (k[0], not k[1])):
        e = np.sort(np.asarray(by[key]))
        uniq, counts = np.unique(e, return_counts=True)
        out[key] = [(int(u), float(c) / len(e)) for u, c in zip(uniq, np.cumsum(counts))]
    return out


def ecdf_at(steps: list[tuple[int, float]], epoch: int) -> float:
    frac = 0.0
    for e, f in steps:
        if e <= epoch:
            frac = f
    return frac


def _write_rows(path: Path, rows: list[dict], columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns))
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in columns})


def write_report(out_dir: str | Path, records: list[RunRecord], selection: Selection, max_epochs: int,
                 baseline_rows: Sequence[dict] = ()) -> dict[str, Path]:
    """Emit ``summary_table.csv``, ``ecdf.csv``, ``loss_vs_nh.csv``, ``loss_vs_tseq.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    s = summarize(records, selection)
    paths = {name: out_dir / name for name in ("summary_table.csv", "ecdf.csv", "loss_vs_nh.csv", "loss_vs_tseq.csv")}
    table = [dict(r, kind="model") for r in s["table"]] + [dict(r) for r in baseline_rows]
    _write_rows(paths["summary_table.csv"], table, ["kind", "architecture", "bias", "n", "test_mean", "test_std"])
    _write_rows(paths["loss_vs_nh.csv"], s["by_n_hidden"], ["architecture", "bias", "n_hidden", "n", "test_mean", "test_std"])
    _write_rows(paths["loss_vs_tseq.csv"], s["by_seq_len"], ["architecture", "bias", "seq_len", "n", "test_mean", "test_std"])
    ecdf_rows = [{"architecture": a, "bias": b, "epochs": e, "fraction": f}
                 for (a, b), steps in convergence_ecdf(records, max_epochs).items() for e, f in steps]
    _write_rows(paths["ecdf.csv"], ecdf_rows, ["architecture", "bias", "epochs", "fraction"])
    return paths
