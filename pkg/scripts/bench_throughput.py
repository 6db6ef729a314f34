"""Time single MSCC charges and corpus generation at several worker counts."""

import argparse
import os
import time

from hybrid_soh import cell
from hybrid_soh.datagen import PerturbationConfig, SimConfig, expand_trajectories, generate_corpus, synth_fade_trajectory
from hybrid_soh.params import CellParameters
from hybrid_soh.protocols import make_mscc


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--workers", type=int, nargs="+", default=[1, 2, 4])
    ap.add_argument("--draws", type=int, default=4)
    args = ap.parse_args()

    p = CellParameters()
    proto = make_mscc()
    cell.simulate_protocol(p, None, proto, 0.0, label=False)
    ts = []
    for _ in range(10):
        t0 = time.perf_counter()
        cell.simulate_protocol(p, None, proto, 0.0, label=False)
        ts.append(time.perf_counter() - t0)
    print(f"single MSCC charge: min {1e3 * min(ts):.2f} ms, median {1e3 * sorted(ts)[5]:.2f} ms")

    traj = synth_fade_trajectory("moderate", 20, p, seed=1)
    jobs = expand_trajectories([traj], p, PerturbationConfig(draws_per_mean=args.draws, seed=1))
    print(f"{len(jobs)} charges, {os.cpu_count()} CPU(s)")
    base = None
    for w in args.workers:
        t0 = time.perf_counter()
        ds = generate_corpus(jobs, proto, SimConfig(seed=3, workers=w))
        dt = time.perf_counter() - t0
        base = base or dt
        print(f"  workers {w}: {dt:.2f} s, speedup {base / dt:.2f}x, digest {ds.digest[:12]}")


if __name__ == "__main__":
    main()
