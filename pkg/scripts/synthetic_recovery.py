#!/usr/bin/env python3
"""Train LSTM and VLSTM on a regression whose conditional mean mixes a fast and a slow EMA.

Prints per-seed epochs-to-floor and test MSE relative to the noise variance,
then the medians.
"""
import argparse
import logging

import numpy as np

from vlstm.model import build_model, loss
from vlstm.synthetic import ema_kernel_regression, sequence_dataset
from vlstm.train import TrainConfig, train_model


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--length", type=int, default=12_000)
    ap.add_argument("--taus", type=float, nargs=2, default=[5.0, 100.0])
    ap.add_argument("--noise-var", type=float, default=2.0)
    ap.add_argument("--seq-len", type=int, default=100)
    ap.add_argument("--n-hidden", type=int, default=2)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--lr", type=float, default=1e-2)
    ap.add_argument("--max-epochs", type=int, default=200)
    ap.add_argument("--floor-factor", type=float, default=1.15)
    ap.add_argument("--data-seed", type=int, default=123)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    v = args.noise_var
    u, y = ema_kernel_regression(args.length, taus=tuple(args.taus), noise_var=v, seed=args.data_seed)
    ds = sequence_dataset(u, y, args.seq_len)
    xt, yt = ds.arrays("test")
    summary = {}
    for kind in ("vlstm", "lstm"):
        hits, finals = [], []
        for seed in range(args.seeds):
            m = build_model(kind, args.n_hidden, args.seq_len, 2 if kind == "vlstm" else 1, True, seed=seed)
            curve = []
            res = train_model(m, ds, TrainConfig(learning_rate=args.lr, max_epochs=args.max_epochs, seed=seed),
                              on_epoch=lambda e, mm: curve.append(loss(mm, xt, yt) / v))
            hit = next((i + 1 for i, c in enumerate(curve) if c <= args.floor_factor), None)
            final = loss(res.final_model, xt, yt) / v
            hits.append(hit if hit is not None else np.inf)
            finals.append(final)
            print(f"{kind} seed={seed} epochs={res.epochs_run} hit={hit} test/v={final:.4f}", flush=True)
        summary[kind] = (float(np.median(hits)), float(np.median(finals)))
    for kind, (h, f) in summary.items():
        print(f"{kind}: median epochs to floor {h:g}, median test/v {f:.4f}")


if __name__ == "__main__":
    main()
