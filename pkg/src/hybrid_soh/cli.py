"""Command-line interface.

Exit codes: 0 success, 2 invalid input or configuration, 3 a stage failed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .apso import ApsoConfig, ObjectiveFailure, optimize, rosenbrock, sphere
from .params import AGING_FIELDS, AgingParameterSet, CellParameters, ParameterError, read_parameter_file

EXIT_OK, EXIT_INVALID, EXIT_STAGE = 0, 2, 3

log = logging.getLogger("hybrid_soh")


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------- helpers


def _config(args):
    from .pipeline import PipelineConfig

    cfg = PipelineConfig.from_json(args.config) if args.config else PipelineConfig()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out is not None:
        over["out_dir"] = args.out
    if getattr(args, "workers", None):
        over["workers"] = args.workers
    cfg = replace(cfg, **over)
    cfg.validate()
    return cfg


def _out_dir(args, default="out") -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _base_params(path) -> CellParameters:
    return read_parameter_file(path) if path else CellParameters()


def _aging_from(args, params) -> AgingParameterSet:
    base = AgingParameterSet.from_params(params)
    if args.aging_file:
        d = json.loads(Path(args.aging_file).read_text())
        base = AgingParameterSet.from_array([float(d[k]) for k in AGING_FIELDS])
    if args.scale:
        mult = np.ones(len(AGING_FIELDS))
        for item in args.scale:
            key, _, val = item.partition("=")
            if key not in AGING_FIELDS:
                raise UsageError(f"--scale: unknown aging parameter {key!r}")
            mult[AGING_FIELDS.index(key)] = float(val)
        base = base.scaled(mult)
    return base


# ---------------------------------------------------------------- subcommands


def cmd_simulate(args) -> int:
    from .cell import reference_capacity, simulate_protocol
    from .protocols import resolve_protocol

    params = _base_params(args.params)
    aging = _aging_from(args, params)
    proto = resolve_protocol(args.protocol)
    trace = simulate_protocol(params, aging, proto, args.soc0, dt=args.dt, solid=args.solid, label=False)
    out = _out_dir(args)
    path = out / args.csv
    trace.to_csv(path)
    cap = reference_capacity(params, aging, args.dt, args.solid)
    print(f"{proto.name}: {len(trace.t)} samples, {trace.t[-1]:.0f} s, charged {trace.throughput[-1]:.4f} Ah, "
          f"capacity {cap:.4f} Ah -> {path}")
    return EXIT_OK


def cmd_identify(args) -> int:
    from .identification import MeasuredCurve, identify_aging

    params = _base_params(args.params)
    curves = [MeasuredCurve.read_csv(p) for p in args.curves]
    warm = AgingParameterSet.from_params(params)
    cfg = ApsoConfig(bounds=[[0, 1]], n_particles=args.particles, max_iters=args.iters,
                     seed=args.seed if args.seed is not None else 0)
    fit = identify_aging(curves, params, warm, cfg, free=tuple(args.free), tol_mV=args.tol_mv)
    out = _out_dir(args)
    d = {k: float(v) for k, v in zip(AGING_FIELDS, fit.aging.as_array())}
    d["rmse_mV"] = fit.rmse_mV
    (out / "aging.json").write_text(json.dumps(d, indent=1, sort_keys=True))
    print(f"rmse {fit.rmse_mV:.3f} mV -> {out / 'aging.json'}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    from .pipeline import Pipeline

    pipe = Pipeline(_config(args))
    with pipe.lock():
        data = pipe.corpus()
    print(f"corpus: {len(data)} segments, digest {data.digest()[:16]}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from .pipeline import Pipeline

    pipe = Pipeline(_config(args))
    with pipe.lock():
        pipe.pretrained()
    print(f"pre-trained weights: artifacts/pretrain-{pipe._keys['pretrain']}.weights")
    return EXIT_OK


def _run_and_emit(args, scenario_fn) -> int:
    from .pipeline import Pipeline
    from .report import emit_report

    pipe = Pipeline(_config(args))
    with pipe.lock():
        report = scenario_fn(pipe)
    files = emit_report(report, Path(pipe.config.out_dir) / "reports", args.formats)
    _print_report(report)
    for f in files:
        print(f"  {f}")
    return EXIT_OK


def _print_report(report) -> None:
    b, a = report.metrics_before, report.metrics_after
    print(f"{report.scenario}: mean abs SOH error {b['mae_soh_pct']:.2f}% -> {a['mae_soh_pct']:.2f}%")
    for cell in sorted(b["per_cell"], key=int):
        print(f"  cell {cell}: {b['per_cell'][cell]['mae_soh_pct']:.2f}% -> {a['per_cell'][cell]['mae_soh_pct']:.2f}% "
              f"({100 * report.reduction(cell):.0f}% reduction)")


def cmd_transfer(args) -> int:
    return _run_and_emit(args, lambda p: p.transfer_eval("transfer"))


def cmd_run(args) -> int:
    from .pipeline import Pipeline
    from .report import emit_report

    pipe = Pipeline(_config(args))
    report = pipe.run()
    emit_report(report, Path(pipe.config.out_dir) / "reports", args.formats)
    _print_report(report)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .datagen import read_dataset
    from .sohnet import evaluate, load_weights

    metrics = evaluate(load_weights(args.weights), read_dataset(args.data))
    text = json.dumps(metrics, indent=1, sort_keys=True)
    if args.out:
        _out_dir(args)
        (Path(args.out) / "metrics.json").write_text(text)
    print(text)
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .pipeline import run_experiment_sweep
    from .report import emit_report, emit_summary

    cfg = _config(args)
    reports = run_experiment_sweep(cfg, args.name)
    rdir = Path(cfg.out_dir) / "reports" / f"sweep-{args.name}"
    for r in reports:
        emit_report(r, rdir, args.formats)
        _print_report(r)
    print(f"summary -> {emit_summary(reports, rdir / 'summary.csv')}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import emit_report, load_report

    report = load_report(args.report)
    out = Path(args.out) if args.out else Path(args.report).parent
    for f in emit_report(report, out, args.formats):
        print(f)
    return EXIT_OK


def cmd_bench_apso(args) -> int:
    fn = {"sphere": sphere, "rosenbrock": rosenbrock}[args.function]
    lo, hi = args.bounds
    cfg = ApsoConfig(bounds=[[lo, hi]] * args.dims, n_particles=args.particles, max_iters=args.iters,
                     seed=args.seed if args.seed is not None else 0)
    res = optimize(fn, cfg, vectorized=True)
    out = _out_dir(args)
    path = out / f"apso-{args.function}-{args.dims}d.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "best_fitness"])
        for k, f in enumerate(res.history):
            w.writerow([k, repr(float(f))])
    print(f"{args.function} {args.dims}-D: best {res.best_fitness:.6g} at {np.round(res.best_position, 6).tolist()} -> {path}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline configuration (JSON)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--threads", type=int, default=1, help="torch intra-op threads (simulation kernels are single-threaded)")
    common.add_argument("-v", "--verbose", action="store_true")

    fmt = argparse.ArgumentParser(add_help=False)
    fmt.add_argument("--formats", nargs="+", default=["csv", "json", "svg"], choices=["csv", "json", "svg"])

    ap = argparse.ArgumentParser(prog="hybrid-soh", description=__doc__.splitlines()[0], parents=[common])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="simulate one protocol and write the trace CSV")
    p.add_argument("--protocol", default="mscc", help="preset name or protocol file")
    p.add_argument("--params", help="parameter file")
    p.add_argument("--aging-file", help="JSON with aging parameter values")
    p.add_argument("--scale", nargs="*", metavar="NAME=MULT", help="scale aging parameters")
    p.add_argument("--soc0", type=float, default=0.0)
    p.add_argument("--dt", type=float, default=1.0)
    p.add_argument("--solid", choices=["pade", "fdm"], default="pade")
    p.add_argument("--csv", default="trace.csv")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("identify", parents=[common], help="fit aging parameters to measured charge curves")
    p.add_argument("curves", nargs="+", help="CSV files with t_s,current_A,voltage_V")
    p.add_argument("--params", help="base parameter file")
    p.add_argument("--free", nargs="+", default=["eps_s_p", "eps_s_n", "d_s_p", "d_s_n", "r0"], choices=AGING_FIELDS)
    p.add_argument("--particles", type=int, default=40)
    p.add_argument("--iters", type=int, default=60)
    p.add_argument("--tol-mv", type=float, default=25.0)
    p.set_defaults(fn=cmd_identify)

    for name, fn, hlp in (("gen-data", cmd_gen_data, "generate the simulated segment corpus"),
                          ("pretrain", cmd_pretrain, "pre-train the network on the corpus")):
        p = sub.add_parser(name, parents=[common], help=hlp)
        p.add_argument("--workers", type=int, help="simulation worker processes")
        p.set_defaults(fn=fn)

    p = sub.add_parser("transfer", parents=[common, fmt], help="transfer to the target cells and evaluate")
    p.set_defaults(fn=cmd_transfer)

    p = sub.add_parser("run", parents=[common, fmt], help="run every pipeline stage and emit the report")
    p.add_argument("--workers", type=int, help="simulation worker processes")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("evaluate", parents=[common], help="evaluate a weights file on a segment dataset")
    p.add_argument("--weights", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("sweep", parents=[common, fmt], help="transfer experiment sweep")
    p.add_argument("name", choices=["segments", "transfer_epochs", "source_cells", "early_life_only"])
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("report", parents=[common, fmt], help="re-render a persisted report JSON")
    p.add_argument("report")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("bench-apso", parents=[common], help="run the optimizer on a test function")
    p.add_argument("--function", choices=["sphere", "rosenbrock"], default="sphere")
    p.add_argument("--dims", type=int, default=5)
    p.add_argument("--particles", type=int, default=100)
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--bounds", type=float, nargs=2, default=[-5.0, 5.0])
    p.set_defaults(fn=cmd_bench_apso)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be positive", file=sys.stderr)
        return EXIT_INVALID
    import torch

    torch.set_num_threads(args.threads)

    from .cell import SimulationError
    from .datagen import DatasetError
    from .identification import NonConvergence
    from .pipeline import ConfigError, StageError
    from .protocols import ProtocolError

    try:
        return args.fn(args)
    except (ConfigError, ParameterError, ProtocolError, UsageError, DatasetError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (SimulationError, NonConvergence, ObjectiveFailure) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE
