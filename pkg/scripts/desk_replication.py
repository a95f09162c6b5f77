#!/usr/bin/env python3
"""One grid cell of the realized-volatility experiment, end to end through the CLI.

Sweeps LSTM and VLSTM at N_h=3, T=40 without bias over ten seeds, selects,
fits the baselines and writes the report.  Without ``--data`` a synthetic
rough-volatility panel is used.
"""
import argparse
import sys
from pathlib import Path

from vlstm.cli import main as vlstm
from vlstm.data import write_csv
from vlstm.synthetic import rough_vol_panel

CONFIG = """data = "{data}"
out_dir = "{out}"
parallelism = {par}

[grid]
archs = ["lstm", "vlstm"]
bias = [false]
n_hidden = [3]
seq_len = [40]
seeds = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9]
"""


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--data", help="realized-variance CSV (date,symbol,rv)")
    ap.add_argument("--out-dir", default="out/desk")
    ap.add_argument("--symbols", type=int, default=4, help="synthetic panel size")
    ap.add_argument("--parallelism", type=int, default=1)
    args = ap.parse_args()

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = args.data
    if data is None:
        data = str(out / "synthetic_rv.csv")
        write_csv(data, rough_vol_panel(args.symbols, seed=0))
    cfg = out / "desk.toml"
    cfg.write_text(CONFIG.format(data=data, out=out, par=args.parallelism))
    for cmd in (["sweep"], ["select"], ["baseline", "--seq-len", "40"], ["report"]):
        code = vlstm(cmd + ["--config", str(cfg)])
        if code:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
