"""Scan wall-clock against sequence length, to eyeball linear cost beyond a single doubling.

    python scripts/scaling_bench.py --lengths 1024 2048 4096 8192 16384
"""
import argparse

import numpy as np

from rmsdepth.experiments import scan_timing


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--lengths", type=int, nargs="+", default=[1024, 2048, 4096, 8192, 16384])
    p.add_argument("--D", type=int, default=32)
    p.add_argument("--N", type=int, default=8)
    p.add_argument("--trials", type=int, default=7)
    args = p.parse_args()

    prev = None
    print(f"{'L':>7s} {'median ms':>10s} {'us/token':>9s} {'ratio':>6s}")
    for L in args.lengths:
        t = float(np.median(scan_timing(L, args.D, args.N, args.trials)))
        ratio = f"{t / prev:6.2f}" if prev else "     -"
        print(f"{L:7d} {1e3 * t:10.2f} {1e6 * t / L:9.2f} {ratio}")
        prev = t


if __name__ == "__main__":
    main()
