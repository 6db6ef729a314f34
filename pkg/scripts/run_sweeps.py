"""Run transfer sweeps on top of an existing pipeline output directory.

    python scripts/run_sweeps.py --out runs/default segments transfer_epochs
"""

import argparse

import torch

from hybrid_soh.pipeline import SWEEPS, PipelineConfig, run_experiment_sweep
from hybrid_soh.report import emit_report, emit_summary


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("sweeps", nargs="*", default=list(SWEEPS), choices=list(SWEEPS))
    ap.add_argument("--out", default="runs/default")
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    torch.set_num_threads(1)

    cfg = PipelineConfig.from_json(args.config) if args.config else PipelineConfig()
    cfg.out_dir, cfg.seed = args.out, args.seed
    cfg.validate()
    for name in args.sweeps:
        reports = run_experiment_sweep(cfg, name)
        for r in reports:
            emit_report(r, f"{args.out}/sweeps/{name}")
        path = emit_summary(reports, f"{args.out}/sweeps/{name}-summary.csv")
        print(f"{name}: {len(reports)} points -> {path}")
        for r in reports:
            print(f"  {r.scenario:32s} {r.metrics_before['mae_soh_pct']:.2f}% -> {r.metrics_after['mae_soh_pct']:.2f}%")


if __name__ == "__main__":
    main()
