"""Run the full desk-scale pipeline and write the baseline report.

    python scripts/run_pipeline.py --out runs/default [--config cfg.json] [--seed 0]
"""

import argparse
import time

import torch

from hybrid_soh.pipeline import Pipeline, PipelineConfig
from hybrid_soh.report import emit_report


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/default")
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    torch.set_num_threads(1)

    cfg = PipelineConfig.from_json(args.config) if args.config else PipelineConfig()
    cfg.out_dir, cfg.seed, cfg.workers = args.out, args.seed, args.workers
    cfg.validate()
    t0 = time.perf_counter()
    report = Pipeline(cfg).run()
    emit_report(report, args.out)
    b, a = report.metrics_before, report.metrics_after
    print(f"done in {time.perf_counter() - t0:.0f} s")
    print(f"MAE {b['mae_soh_pct']:.2f}% -> {a['mae_soh_pct']:.2f}%")
    for c in sorted(b["per_cell"]):
        print(f"  cell {c}: {b['per_cell'][c]['mae_soh_pct']:.2f}% -> {a['per_cell'][c]['mae_soh_pct']:.2f}% "
              f"({100 * report.reduction(c):.0f}% reduction)")


if __name__ == "__main__":
    main()
