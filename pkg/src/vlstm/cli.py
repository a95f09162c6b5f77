"""Command-line entry point: ``vlstm <command> [options]``.

Commands read an optional TOML config (``--config``) and command-line flags,
with flags taking precedence.  Everything a command writes goes under the
configured output directory, which also receives a ``config.json`` echo of
the resolved settings.

Example config::

    data = "rv.csv"            # or "synthetic" for a generated rough-vol panel
    out_dir = "runs/desk"
    parallelism = 1
    seed = 0

    [splits]
    train_end = "2012-09-06"

    [train]
    learning_rate = 1e-3
    max_epochs = 1000

    [grid]
    archs = ["lstm", "vlstm"]
    bias = [false]
    n_hidden = [3]
    seq_len = [40]
    seeds = [0, 1, 2]
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import baselines, kernels, sweep
from .data import DataError, SplitDates, load_csv, make_windows, standardize
from .sweep import ArchSpec, GridSpec
from .synthetic import rough_vol_panel
from .train import TrainConfig

log = logging.getLogger("vlstm")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    data: str | None = None
    out_dir: str = "out"
    splits: SplitDates = field(default_factory=SplitDates)
    train: TrainConfig = field(default_factory=TrainConfig)
    grid: GridSpec = field(default_factory=GridSpec)
    parallelism: int = 1
    seed: int = 0
    selection: str = "quantile_gap"
    reference_mse: float = baselines.REFERENCE_MSE
    synthetic_symbols: int = 6

    def validate(self) -> None:
        if self.parallelism < 1:
            raise UsageError("parallelism must be >= 1")
        if self.selection not in ("quantile_gap", "below_mean", "all"):
            raise UsageError(f"unknown selection method {self.selection!r}")
        g = self.grid
        if not (g.archs and g.bias and g.n_hidden and g.seq_len and g.seeds):
            raise UsageError("every grid axis needs at least one value")
        if min(g.n_hidden) < 1 or min(g.seq_len) < 1:
            raise UsageError("n_hidden and seq_len must be >= 1")
        for a in g.archs:
            if a.kind not in ("lstm", "vlstm", "msgru") or a.n_scales < 1:
                raise UsageError(f"bad architecture {a}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"]["archs"] = [f"{a.kind}:{a.n_scales}:{a.coupling}" for a in self.grid.archs]
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        try:
            splits = SplitDates(**raw.pop("splits", {}))
            train = TrainConfig(**raw.pop("train", {}))
            g = dict(raw.pop("grid", {}))
            if "archs" in g:
                g["archs"] = [ArchSpec.parse(a) for a in g["archs"]]
            grid = GridSpec(**g)
            return cls(splits=splits, train=train, grid=grid, **raw)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid config: {exc}") from exc


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"cannot parse {path}: {exc}") from None
    return ExperimentConfig.from_dict(raw)


def _resolve(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(getattr(args, "config", None))
    for name in ("data", "out_dir", "parallelism", "seed", "selection", "reference_mse"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    overrides = {k: getattr(args, k) for k in ("learning_rate", "max_epochs", "patience", "batch_size")
                 if getattr(args, k, None) is not None}
    if overrides:
        try:
            cfg.train = TrainConfig(**{**asdict(cfg.train), **overrides})
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    cfg.validate()
    return cfg


def _echo_config(cfg: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)


def _load_series(cfg: ExperimentConfig):
    if cfg.data is None:
        raise UsageError("no data file given (set `data` in the config or pass --data)")
    if cfg.data == "synthetic":
        return rough_vol_panel(cfg.synthetic_symbols, cfg.splits.train_start, cfg.splits.test_end, seed=cfg.seed)
    if not Path(cfg.data).is_file():
        raise DataError(f"data file not found: {cfg.data}")
    return load_csv(cfg.data)


# -- commands ---------------------------------------------------------------------

def cmd_fit_kernel(args) -> int:
    if not args.alpha > 0:
        raise UsageError("--alpha must be positive")
    if not 0 < args.lo < args.hi:
        raise UsageError("need 0 < --lo < --hi")
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    k = kernels.fit_exp_sum(args.alpha, args.lo, args.hi, args.n, sweeps=args.sweeps)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"kernel_alpha{args.alpha:g}_n{args.n}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tau", "weight"])
        for tau, wt in zip(k.timescales, k.weights):
            w.writerow([repr(float(tau)), repr(float(wt))])
    err = kernels.approx_error(k)
    print(f"sup_rel_error={err:.6g} alpha={args.alpha:g} range=[{args.lo:g},{args.hi:g}] n={args.n} -> {path}")
    return EXIT_OK


def _train_task(args) -> dict:
    n = args.n_scales if args.n_scales is not None else (1 if args.arch == "lstm" else 2)
    arch = ArchSpec(args.arch, n, args.coupling)
    return {"kind": arch.kind, "n_scales": arch.n_scales, "coupling": arch.coupling,
            "architecture": arch.label, "bias": args.bias, "n_hidden": args.n_hidden,
            "seq_len": args.seq_len, "seed": args.run_seed}


def cmd_train(args) -> int:
    cfg = _resolve(args)
    series = _load_series(cfg)
    out = Path(cfg.out_dir)
    _echo_config(cfg, out)
    task = _train_task(args)
    rec = sweep.run_one(task, series, cfg.splits, cfg.train, out, base_seed=cfg.seed)
    (out / "train").mkdir(exist_ok=True)
    with open(out / "train" / f"{rec.run_id}.json", "w") as fh:
        fh.write(rec.to_json() + "\n")
    print(rec.to_json())
    return EXIT_OK if rec.error is None else EXIT_FAIL


def cmd_sweep(args) -> int:
    cfg = _resolve(args)
    series = _load_series(cfg)
    out = Path(cfg.out_dir)
    _echo_config(cfg, out)
    recs = sweep.run_grid(cfg.grid, series, cfg.splits, cfg.train, out, cfg.parallelism, cfg.seed)
    failed = sum(r.error is not None for r in recs)
    print(f"{len(recs)} runs in {out / 'runs.jsonl'} ({failed} failed)")
    return EXIT_OK


def _records(cfg: ExperimentConfig) -> list[sweep.RunRecord]:
    path = Path(cfg.out_dir) / "runs.jsonl"
    recs = sweep.read_log(path)
    if not recs:
        raise DataError(f"no run records in {path}")
    return recs


def cmd_select(args) -> int:
    cfg = _resolve(args)
    sel = sweep.select_records(_records(cfg), cfg.selection)
    groups = []
    for key, recs in sel.selected.items():
        res = sel.results.get(key)
        groups.append({
            "group": dict(zip(sel.keys, key)),
            "threshold": res.threshold if res else None,
            "selected": [r.run_id for r in recs],
            "fallback": key in sel.fallback,
        })
    path = Path(cfg.out_dir) / "selection.json"
    with open(path, "w") as fh:
        json.dump({"method": sel.method, "groups": groups}, fh, indent=2, default=str)
    print(f"{sum(len(g['selected']) for g in groups)} runs selected in {len(groups)} groups -> {path}")
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = _resolve(args)
    recs = _records(cfg)
    sel = sweep.select_records(recs, cfg.selection)
    rows = [{"kind": "reference", "architecture": "rough volatility (imported)",
             "test_mean": baselines.reference_mse({"reference_mse": cfg.reference_mse})}]
    bpath = Path(cfg.out_dir) / "baseline.json"
    if bpath.exists():
        rows += json.loads(bpath.read_text())["rows"]
    paths = sweep.write_report(Path(cfg.out_dir) / "report", recs, sel, cfg.train.max_epochs, rows)
    for row in sweep.summarize(recs, sel)["table"]:
        m = row["test_mean"]
        print(f"{row['architecture']:>12} bias={row['bias']!s:5} n={row['n']:4d} "
              + (f"test={m:.4f} +/- {row['test_std']:.4f}" if m is not None else "test=n/a"))
    print("wrote " + ", ".join(str(p) for p in paths.values()))
    return EXIT_OK


def cmd_baseline(args) -> int:
    cfg = _resolve(args)
    series = _load_series(cfg)
    out = Path(cfg.out_dir)
    _echo_config(cfg, out)
    ds = standardize(make_windows(series, args.seq_len, cfg.splits))
    xtr, ytr = ds.arrays("train")
    xte, yte = ds.arrays("test")
    if len(yte) == 0:
        raise DataError("test split is empty")
    fit = baselines.fit_linear_kernel(xtr, ytr, baselines.DEFAULT_TIMESCALES)
    pred_lin = fit.predict(xte)
    pred_per = baselines.persistence_batch(xte)
    m = ds.mask("test")
    baselines.export_predictions(out / "baseline_predictions.csv", ds.symbols[m], ds.dates[m], pred_lin, yte)
    rows = [
        {"kind": "baseline", "architecture": "persistence", "n": len(yte),
         "test_mean": float(np.mean((pred_per - yte) ** 2))},
        {"kind": "baseline", "architecture": "ema-bank linear", "n": len(yte),
         "test_mean": float(np.mean((pred_lin - yte) ** 2))},
    ]
    with open(out / "baseline.json", "w") as fh:
        json.dump({"seq_len": args.seq_len, "timescales": list(fit.timescales), "rows": rows}, fh, indent=2)
    for r in rows:
        print(f"{r['architecture']:>16} test={r['test_mean']:.4f}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--data", help="realized-variance CSV, or 'synthetic'")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--seed", type=int, help="base seed for all derived randomness")


def _training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--batch-size", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vlstm", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-kernel", help="fit an exponential-sum approximation of x^-alpha")
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--lo", type=float, default=1.0)
    p.add_argument("--hi", type=float, default=1000.0)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--sweeps", type=int, default=1)
    p.add_argument("--out-dir", dest="out_dir", default="out")
    p.set_defaults(func=cmd_fit_kernel)

    p = sub.add_parser("train", help="one training run")
    _common(p)
    _training_flags(p)
    p.add_argument("--arch", choices=("lstm", "vlstm", "msgru"), default="vlstm")
    p.add_argument("--n-scales", type=int)
    p.add_argument("--coupling", choices=("independent", "tied"), default="independent")
    p.add_argument("--n-hidden", type=int, default=3)
    p.add_argument("--seq-len", type=int, default=40)
    p.add_argument("--bias", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--run-seed", type=int, default=0, help="per-run seed index (combined with --seed)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="run (or resume) the configured grid")
    _common(p)
    _training_flags(p)
    p.add_argument("--parallelism", type=int)
    p.set_defaults(func=cmd_sweep)

    for name, func, helptext in (("select", cmd_select, "select runs from the log"),
                                 ("report", cmd_report, "write summary CSVs")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--selection", choices=("quantile_gap", "below_mean", "all"))
        p.add_argument("--reference-mse", type=float)
        p.set_defaults(func=func)

    p = sub.add_parser("baseline", help="persistence and EMA-bank linear baselines")
    _common(p)
    p.add_argument("--seq-len", type=int, default=100)
    p.set_defaults(func=cmd_baseline)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"vlstm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"vlstm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
