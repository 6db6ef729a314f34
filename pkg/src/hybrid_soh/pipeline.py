"""End-to-end pipeline: fade trajectories, aging expansion, charge simulation,
pre-training, held-out target cells, transfer and evaluation.

Every stage result is stored under ``<out>/artifacts`` keyed by a hash of
the configuration fields it depends on plus its upstream keys, so a rerun
reuses whatever is already there.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .cell import SimulationError, reference_capacity, simulate_protocol
from .datagen import (
    FADE_PRESETS,
    HELDOUT_PRESETS,
    PerturbationConfig,
    SegmentDataset,
    SimConfig,
    expand_trajectories,
    generate_corpus,
    read_dataset,
    segment_trace,
    synth_fade_trajectory,
    write_dataset,
)
from .identification import AgingTrajectory, MeasuredCurve, identify_trajectory
from .params import (
    NOMINAL_CAPACITY_AH,
    AgingParameterSet,
    CellParameters,
    OcpTable,
    ParameterError,
    read_parameter_file,
)
from .protocols import ProtocolError, make_cccv, resolve_protocol
from .sohnet import (
    TrainingConfig,
    TransferConfig,
    evaluate,
    load_weights,
    predict,
    save_weights,
    train,
    transfer_finetune,
)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineConfig:
    out_dir: str = "runs/default"
    param_file: str | None = None
    ocp_n_file: str | None = None
    ocp_p_file: str | None = None
    protocol: str = "mscc"
    seed: int = 0
    # simulated corpus
    n_base_trajectories: int = 6
    cycles_per_trajectory: int = 60
    draws_per_mean: int = 30
    perturb_std: float = 0.05
    corpus_cap: int = 50000
    keep_per_set: int = 0  # 0: derived from the cap
    identify_every: int = 0  # >0: re-identify every k-th cycle of the base trajectories
    # held-out target cells ("real" data)
    n_target_cells: int = 3
    target_cycles: int = 60
    target_dt: float = 0.5
    target_solid: str = "fdm"
    target_fdm_nodes: int = 50
    target_ocp_shift: float = 0.03  # V added to the cathode OCP of target cells
    validation_per_cycle: int = 5
    transfer_segments: int = 45
    # pre-training (small batches: the desk-scale corpus is far smaller, so this keeps the step count up)
    batch_size: int = 128
    lr: float = 5e-4
    epochs: int = 30
    lr_decay: float = 0.05
    # transfer
    transfer_epochs: int = 5
    transfer_lr: float = 1e-5
    transfer_batch_size: int = 1024
    n_real_replicated: int = 5000
    n_sim_transfer: int = 50000
    head_only: bool = False
    replicate: str = "tile"
    workers: int = 1

    # fields that do not change results
    _NON_SEMANTIC = ("out_dir", "workers")

    def validate(self) -> None:
        for name in ("param_file", "ocp_n_file", "ocp_p_file"):
            path = getattr(self, name)
            if path is not None and not Path(path).exists():
                raise ConfigError(f"{name}: file {path} does not exist")
        positive = (
            "n_base_trajectories", "cycles_per_trajectory", "draws_per_mean", "perturb_std", "corpus_cap",
            "n_target_cells", "target_cycles", "target_dt", "validation_per_cycle", "transfer_segments",
            "batch_size", "lr", "epochs", "transfer_epochs", "transfer_lr", "transfer_batch_size", "n_real_replicated",
            "workers",
        )
        for name in positive:
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and v > 0):
                raise ConfigError(f"{name} must be positive, got {v!r}")
        if self.cycles_per_trajectory < 10 or self.target_cycles < 10:
            raise ConfigError("trajectories need at least 10 cycles")
        if self.n_target_cells > len(HELDOUT_PRESETS):
            raise ConfigError(f"at most {len(HELDOUT_PRESETS)} target cells are supported")
        if self.target_solid not in ("pade", "fdm"):
            raise ConfigError("target_solid must be 'pade' or 'fdm'")
        try:
            resolve_protocol(self.protocol)
        except ProtocolError as exc:
            raise ConfigError(str(exc)) from exc
        out = Path(self.out_dir)
        probe = out if out.exists() else out.parent
        if probe.exists() and not os.access(probe, os.W_OK):
            raise ConfigError(f"output directory {out} is not writable")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        base = path.parent
        for key in ("param_file", "ocp_n_file", "ocp_p_file"):
            if d.get(key) and not Path(d[key]).is_absolute():
                d[key] = str(base / d[key])
        return cls.from_dict(d)

    def digest(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in self._NON_SEMANTIC}
        for key in ("param_file", "ocp_n_file", "ocp_p_file"):
            if d[key]:
                d[key] = hashlib.sha256(Path(d[key]).read_bytes()).hexdigest()
        return _hash(d)


def smoke_config(out_dir: str, seed: int = 0) -> PipelineConfig:
    """Small configuration used as the end-to-end smoke test."""
    return PipelineConfig(
        out_dir=out_dir, seed=seed, n_base_trajectories=2, cycles_per_trajectory=20, draws_per_mean=2,
        corpus_cap=2000, n_target_cells=3, target_cycles=20, epochs=30, batch_size=256, transfer_batch_size=256,
        n_real_replicated=500, n_sim_transfer=2000,
    )


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


# ---------------------------------------------------------------- trajectory I/O


def trajectories_to_json(trajs) -> list:
    return [
        {"name": t.name, "entries": [
            {"cycle": e.cycle, "aging": [float(v) for v in e.aging.as_array()], "capacity": e.capacity}
            for e in t]}
        for t in trajs
    ]


def trajectories_from_json(data) -> list[AgingTrajectory]:
    out = []
    for t in data:
        traj = AgingTrajectory(name=t["name"])
        for e in t["entries"]:
            traj.append(e["cycle"], AgingParameterSet.from_array(e["aging"]), e["capacity"])
        out.append(traj)
    return out


# ---------------------------------------------------------------- pipeline


@dataclass
class ExperimentReport:
    scenario: str
    metrics_before: dict
    metrics_after: dict
    curves: dict  # cell id -> {"cycles", "true", "before", "after"}
    provenance: dict
    extra: dict = field(default_factory=dict)
    figures: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d) -> "ExperimentReport":
        d = dict(d)
        d["curves"] = {int(k) if str(k).isdigit() else k: v for k, v in d["curves"].items()}
        return cls(**d)

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("figures", None)
        return _hash(d)

    def reduction(self, cell: int) -> float:
        """Fractional reduction of the cell's mean absolute SOH error."""
        b = self.metrics_before["per_cell"][cell]["mae_soh_pct"]
        a = self.metrics_after["per_cell"][cell]["mae_soh_pct"]
        return 1.0 - a / b if b > 0 else 0.0


def _json_ready(metrics: dict) -> dict:
    m = dict(metrics)
    m["per_cell"] = {int(k): v for k, v in m["per_cell"].items()}
    return m


class Pipeline:
    STAGES = ("trajectories", "corpus", "pretrain", "targets", "transfer")

    def __init__(self, config: PipelineConfig):
        config.validate()
        self.config = config
        self.out = Path(config.out_dir)
        self.art = self.out / "artifacts"
        self._keys: dict = {}
        self.timings: dict = {}

    # -- helpers

    @property
    def params(self) -> CellParameters:
        c = self.config
        if c.param_file:
            p = read_parameter_file(c.param_file)
        else:
            p = CellParameters()
        if c.ocp_n_file:
            p = replace(p, ocp_n=OcpTable.from_csv(c.ocp_n_file))
        if c.ocp_p_file:
            p = replace(p, ocp_p=OcpTable.from_csv(c.ocp_p_file))
        return p

    def target_params(self) -> CellParameters:
        p = self.params
        shifted = OcpTable(p.ocp_p.theta, p.ocp_p.potential + self.config.target_ocp_shift)
        return replace(p, ocp_p=shifted)

    def _key(self, stage: str, fields: dict, upstream=()) -> str:
        k = _hash({"stage": stage, "fields": fields, "up": [self._keys[u] for u in upstream],
                   "params": self.params.digest(), "version": __version__})
        self._keys[stage] = k
        return k

    def _path(self, stage: str, suffix: str) -> Path:
        return self.art / f"{stage}-{self._keys[stage]}{suffix}"

    @contextmanager
    def lock(self):
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / ".lock"
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(f"{self.out} is locked by another pipeline ({path})") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        try:
            yield
        finally:
            path.unlink(missing_ok=True)

    def _run_stage(self, name, fn):
        t0 = time.perf_counter()
        try:
            out = fn()
        except (ConfigError, ParameterError, ProtocolError):
            raise
        except Exception as exc:
            raise StageError(name, exc) from exc
        self.timings[name] = time.perf_counter() - t0
        return out

    # -- stage 1: base trajectories

    def trajectories(self) -> list[AgingTrajectory]:
        c = self.config
        key_fields = {"n": c.n_base_trajectories, "cycles": c.cycles_per_trajectory, "seed": c.seed,
                      "identify_every": c.identify_every}
        self._key("trajectories", key_fields)
        path = self._path("trajectories", ".json")
        if path.exists():
            return trajectories_from_json(json.loads(path.read_text()))

        def compute():
            kinds = list(FADE_PRESETS)
            trajs = [synth_fade_trajectory(kinds[k % len(kinds)], c.cycles_per_trajectory, self.params,
                                           seed=c.seed * 1000 + k)
                     for k in range(c.n_base_trajectories)]
            if c.identify_every:
                trajs = [self._reidentify(t) for t in trajs]
            self.art.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(trajectories_to_json(trajs)))
            return trajs

        return self._run_stage("trajectories", compute)

    def _reidentify(self, traj: AgingTrajectory) -> AgingTrajectory:
        """Replace every k-th entry by parameters identified from its 1C charge curve."""
        p = self.params
        picked = [e for e in traj if e.cycle % self.config.identify_every == 0]
        curves = []
        for e in picked:
            tr = simulate_protocol(p, e.aging, make_cccv(1.0), 0.0, label=False)
            curves.append(MeasuredCurve.from_trace(tr, rate=1.0, cycle=e.cycle, soc0=0.0))
        ident, _ = identify_trajectory(curves, p, AgingParameterSet.from_params(p),
                                       free=("eps_s_p", "eps_s_n", "d_s_p", "d_s_n", "r0"))
        ident.name = traj.name + "-identified"
        return ident

    # -- stage 2-4: expansion, protocol injection, corpus

    def corpus(self) -> SegmentDataset:
        c = self.config
        trajs = self.trajectories()
        key_fields = {"draws": c.draws_per_mean, "std": c.perturb_std, "cap": c.corpus_cap, "seed": c.seed,
                      "keep": c.keep_per_set, "protocol": c.protocol}
        self._key("corpus", key_fields, ["trajectories"])
        path = self._path("corpus", ".bin")
        if path.exists():
            return read_dataset(path)

        def compute():
            jobs = expand_trajectories(trajs, self.params,
                                       PerturbationConfig(std=c.perturb_std, draws_per_mean=c.draws_per_mean,
                                                          seed=c.seed))
            keep = c.keep_per_set or max(1, math.ceil(3 * c.corpus_cap / len(jobs)))
            cfg = SimConfig(seed=c.seed, keep_per_set=keep, cap=c.corpus_cap, workers=c.workers)
            handle = generate_corpus(jobs, resolve_protocol(c.protocol), cfg, path=path)
            (self.art / f"corpus-{self._keys['corpus']}.json").write_text(json.dumps(
                {"n_sets": handle.n_sets, "segments": len(handle), "skipped": len(handle.skipped),
                 "digest": handle.digest}))
            return handle.dataset

        return self._run_stage("corpus", compute)

    # -- stage 5: pre-training

    def training_config(self) -> TrainingConfig:
        c = self.config
        return TrainingConfig(batch_size=c.batch_size, lr_init=c.lr, max_epochs=c.epochs, lr_decay=c.lr_decay,
                              seed=c.seed)

    def pretrained(self):
        c = self.config
        corpus = self.corpus()
        self._key("pretrain", dataclasses.asdict(self.training_config()), ["corpus"])
        path = self._path("pretrain", ".weights")
        hist_path = self._path("pretrain", ".history.json")
        if path.exists():
            return load_weights(path)

        def compute():
            torch.set_num_threads(1)
            w, hist = train(corpus, config=self.training_config())
            save_weights(w, path)
            hist_path.write_text(json.dumps([dataclasses.asdict(h) for h in hist]))
            return load_weights(path)  # same float32 round trip as a cached run

        return self._run_stage("pretrain", compute)

    # -- stage 6: held-out target cells

    def targets(self) -> tuple[SegmentDataset, list]:
        """All windows of one MSCC charge per cycle of each target cell, plus
        the cells' true capacity trajectories."""
        c = self.config
        key_fields = {"n": c.n_target_cells, "cycles": c.target_cycles, "dt": c.target_dt,
                      "solid": c.target_solid, "nodes": c.target_fdm_nodes, "shift": c.target_ocp_shift,
                      "seed": c.seed, "protocol": c.protocol}
        self._key("targets", key_fields)
        path = self._path("targets", ".bin")
        traj_path = self._path("targets", ".json")
        if path.exists() and traj_path.exists():
            return read_dataset(path), trajectories_from_json(json.loads(traj_path.read_text()))

        def compute():
            base = self.params
            real = self.target_params()
            kinds = list(HELDOUT_PRESETS)
            proto = resolve_protocol(c.protocol)
            trajs, parts = [], []
            for cell in range(c.n_target_cells):
                # fade shapes are defined on the model cell, capacities measured on the "real" one
                traj = synth_fade_trajectory(kinds[cell], c.target_cycles, base, seed=10_000 + c.seed * 100 + cell)
                real_traj = AgingTrajectory(name=f"target-{cell}-{kinds[cell]}")
                for e in traj:
                    rng = np.random.default_rng(np.random.SeedSequence([c.seed, 0x7A6, cell, e.cycle]))
                    soc0 = float(rng.uniform(0.0, 0.3))
                    try:
                        cap = reference_capacity(real, e.aging, c.target_dt, c.target_solid, c.target_fdm_nodes)
                        tr = simulate_protocol(real, e.aging, proto, soc0, dt=c.target_dt, solid=c.target_solid,
                                               fdm_nodes=c.target_fdm_nodes, label=False)
                    except SimulationError as exc:
                        log.warning("target cell %d cycle %d skipped: %s", cell, e.cycle, exc)
                        continue
                    real_traj.append(e.cycle, e.aging, cap)
                    segs = segment_trace(tr, label=cap, source=(cell, e.cycle, 0))
                    for k, s in enumerate(segs):
                        s.source = (cell, e.cycle, k)
                    parts.append(SegmentDataset.from_segments(segs))
                trajs.append(real_traj)
            data = SegmentDataset.concat(parts)
            self.art.mkdir(parents=True, exist_ok=True)
            write_dataset(data, path)
            traj_path.write_text(json.dumps(trajectories_to_json(trajs)))
            return data, trajs

        return self._run_stage("targets", compute)

    def split_targets(self, targets: SegmentDataset, seed_offset: int = 0):
        """Validation: ``validation_per_cycle`` random windows per (cell, cycle).
        Returns (validation indices, remaining indices usable for transfer)."""
        c = self.config
        rng = np.random.default_rng(np.random.SeedSequence([c.seed, 0x5A1, seed_offset]))
        keys = targets.ids[:, 0].astype(np.int64) * 100_000 + targets.ids[:, 1]
        val = []
        for key in np.unique(keys):
            idx = np.flatnonzero(keys == key)
            val.extend(rng.choice(idx, min(c.validation_per_cycle, len(idx)), replace=False))
        val = np.sort(np.array(val, dtype=np.int64))
        rest = np.setdiff1d(np.arange(len(targets)), val)
        return val, rest

    def pick_transfer(self, targets: SegmentDataset, pool_idx, n: int, cells=None, max_cycle=None, seed_offset=0):
        c = self.config
        idx = np.asarray(pool_idx)
        if cells is not None:
            idx = idx[np.isin(targets.ids[idx, 0], list(cells))]
        if max_cycle is not None:
            idx = idx[targets.ids[idx, 1] < max_cycle]
        if len(idx) < n:
            raise ValueError(f"only {len(idx)} target segments available, {n} requested")
        rng = np.random.default_rng(np.random.SeedSequence([c.seed, 0x7F5, seed_offset]))
        return np.sort(rng.choice(idx, n, replace=False))

    # -- stage 7: transfer + evaluate

    def transfer_config(self, **over) -> TransferConfig:
        c = self.config
        kw = dict(n_real=c.n_real_replicated, n_sim=c.n_sim_transfer, epochs=c.transfer_epochs, lr=c.transfer_lr,
                  lr_decay=c.lr_decay, batch_size=c.transfer_batch_size, head_only=c.head_only, replicate=c.replicate,
                  seed=c.seed)
        kw.update(over)
        return TransferConfig(**kw)

    def transfer_eval(self, scenario: str, n_segments=None, cells=None, max_cycle=None, seed_offset=0,
                      **transfer_over) -> ExperimentReport:
        c = self.config
        weights = self.pretrained()
        corpus = self.corpus()
        targets, trajs = self.targets()
        val_idx, rest_idx = self.split_targets(targets)
        n = c.transfer_segments if n_segments is None else n_segments
        pick = self.pick_transfer(targets, rest_idx, n, cells, max_cycle, seed_offset)
        val = targets.subset(val_idx)
        tcfg = self.transfer_config(**transfer_over)

        def compute():
            torch.set_num_threads(1)
            before = predict(weights, val)
            tuned = transfer_finetune(weights, targets.subset(pick), corpus, tcfg)
            after = predict(tuned, val)
            return before, after, tuned

        before, after, tuned = self._run_stage("transfer", compute)
        m_before = _json_ready(evaluate(weights, val, predictions=before))
        m_after = _json_ready(evaluate(tuned, val, predictions=after))
        curves = {}
        for cell, traj in enumerate(trajs):
            m = val.ids[:, 0] == cell
            cycles = np.unique(val.ids[m, 1])
            est_b = [float(before[m & (val.ids[:, 1] == cy)].mean()) for cy in cycles]
            est_a = [float(after[m & (val.ids[:, 1] == cy)].mean()) for cy in cycles]
            true = {e.cycle: e.capacity for e in traj}
            curves[cell] = {"cycles": [int(x) for x in cycles], "true": [true[int(x)] for x in cycles],
                            "before": est_b, "after": est_a, "name": traj.name}
        provenance = {
            "seed": c.seed, "config_digest": c.digest(), "code_version": __version__,
            "artifacts": dict(self._keys), "transfer": dataclasses.asdict(tcfg),
            "transfer_ids": targets.ids[pick].tolist(),
        }
        extra = {"errors_before_pct": (100.0 * (before - val.labels) / NOMINAL_CAPACITY_AH).tolist(),
                 "errors_after_pct": (100.0 * (after - val.labels) / NOMINAL_CAPACITY_AH).tolist(),
                 "n_transfer_segments": int(n), "cells": None if cells is None else sorted(int(x) for x in cells),
                 "max_cycle": max_cycle, "n_validation": int(len(val)), "corpus_size": int(len(corpus))}
        return ExperimentReport(scenario, m_before, m_after, curves, provenance, extra)

    def run(self) -> ExperimentReport:
        with self.lock():
            self.trajectories()
            self.corpus()
            self.pretrained()
            self.targets()
            report = self.transfer_eval("baseline")
        return report


def run_pipeline(config: PipelineConfig) -> ExperimentReport:
    return Pipeline(config).run()


SWEEPS = {
    "segments": [15, 30, 45, 60, 75, 90],
    "transfer_epochs": [5, 15, 25, 35, 45, 55],
    "source_cells": [],
    "early_life_only": [],
}


def run_experiment_sweep(config: PipelineConfig, sweep: str, points=None) -> list[ExperimentReport]:
    """One transfer + evaluation per sweep point, sharing the pre-trained
    weights (which must already exist)."""
    if sweep not in SWEEPS:
        raise ConfigError(f"unknown sweep {sweep!r}; choose from {sorted(SWEEPS)}")
    pipe = Pipeline(config)
    pipe.trajectories()
    pipe._key("corpus", {"draws": config.draws_per_mean, "std": config.perturb_std, "cap": config.corpus_cap,
                         "seed": config.seed, "keep": config.keep_per_set, "protocol": config.protocol},
              ["trajectories"])
    pipe._key("pretrain", dataclasses.asdict(pipe.training_config()), ["corpus"])
    if not pipe._path("pretrain", ".weights").exists():
        raise ConfigError("no pre-trained weights for this configuration; run 'pretrain' first")
    points = SWEEPS[sweep] if points is None else list(points)
    reports = []
    with pipe.lock():
        if sweep == "segments":
            for n in points:
                reports.append(pipe.transfer_eval(f"segments-{n}", n_segments=int(n)))
        elif sweep == "transfer_epochs":
            for e in points:
                reports.append(pipe.transfer_eval(f"epochs-{e}", epochs=int(e)))
        elif sweep == "source_cells":
            for held in points or range(config.n_target_cells):
                src = [k for k in range(config.n_target_cells) if k != held]
                r = pipe.transfer_eval(f"holdout-cell-{held}", cells=src)
                r.extra["held_out"] = int(held)
                reports.append(r)
        elif sweep == "early_life_only":
            reports.append(pipe.transfer_eval("early-life", n_segments=15, max_cycle=10))
    return reports


def summary_rows(reports) -> list[dict]:
    rows = []
    for r in reports:
        rows.append({
            "scenario": r.scenario,
            "mae_before_pct": r.metrics_before["mae_soh_pct"],
            "mae_after_pct": r.metrics_after["mae_soh_pct"],
            "rmse_before_ah": r.metrics_before["rmse_ah"],
            "rmse_after_ah": r.metrics_after["rmse_ah"],
            "within2_after": r.metrics_after["within_2pct"],
        })
    return rows
