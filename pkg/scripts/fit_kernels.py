#!/usr/bin/env python3
"""Table of sup relative errors for power-law kernels fitted by sums of exponentials."""
import argparse
import logging

from vlstm.kernels import approx_error, fit_exp_sum


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--alphas", type=float, nargs="+", default=[0.3, 0.5, 0.8])
    ap.add_argument("--decades", type=int, nargs="+", default=[1, 2, 3, 4])
    ap.add_argument("--max-n", type=int, default=6)
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)

    print("alpha,decades,n,sup_rel_error,timescales")
    for alpha in args.alphas:
        for d in args.decades:
            for n in range(1, args.max_n + 1):
                k = fit_exp_sum(alpha, 1.0, 10.0 ** d, n)
                taus = " ".join(f"{t:.4g}" for t in k.timescales)
                print(f"{alpha:g},{d},{n},{approx_error(k):.4g},{taus}", flush=True)


if __name__ == "__main__":
    main()
