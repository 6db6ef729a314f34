"""Optimizer benchmark on sphere and Rosenbrock over several seeds."""

import argparse

import numpy as np

from hybrid_soh.apso import ApsoConfig, optimize, rosenbrock, sphere


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--dims", type=int, default=5)
    ap.add_argument("--iters", type=int, default=500)
    ap.add_argument("--seeds", type=int, default=8)
    args = ap.parse_args()
    for name, fn in (("sphere", sphere), ("rosenbrock", rosenbrock)):
        best = []
        for s in range(args.seeds):
            cfg = ApsoConfig(bounds=[[-5.0, 5.0]] * args.dims, max_iters=args.iters, seed=s)
            best.append(optimize(fn, cfg).best_fitness)
        best = np.array(best)
        print(f"{name:10s} {args.dims}-d: median {np.median(best):.3e}, min {best.min():.3e}, max {best.max():.3e}")


if __name__ == "__main__":
    main()
