"""Synthetic training data: aging-parameter expansion, fade trajectories,
batch charge simulation, throughput-window segmentation and 5x5x2 packing.

Dataset file layout (little-endian)::

    b"CBSEG1"
    u64 count, u32 version, f64 v_lo, f64 v_span, f64 i_scale, f64 nominal_ah, f64 delta_q
    count x (3 x u32 ids, f64 start_throughput, f64 label_capacity, 50 x f32 planes)
    u64 checksum (blake2b-64 of everything between the magic and the checksum)
"""

from __future__ import annotations

import hashlib
import logging
import math
import multiprocessing as mp
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cell import SimulationError, reference_capacity, simulate_protocol
from .identification import AgingTrajectory
from .params import AGING_FIELDS, NOMINAL_CAPACITY_AH, AgingParameterSet, CellParameters
from .protocols import Protocol

log = logging.getLogger(__name__)

V_LO = 2.5
V_HI = 4.2
I_SCALE = 2.0 * NOMINAL_CAPACITY_AH  # 2C in amps
DELTA_Q = 1.5
STRIDE_Q = 0.029  # ~57 windows over a full charge from empty
N_POINTS = 25
MAGIC = b"CBSEG1"
VERSION = 1
_HEADER = struct.Struct("<QI5d")
_RECORD = np.dtype([("ids", "<u4", (3,)), ("start_q", "<f8"), ("label", "<f8"), ("planes", "<f4", (50,))])


class DatasetError(IOError):
    pass


# ---------------------------------------------------------------- perturbation


@dataclass
class PerturbationConfig:
    means: tuple = (1.0, 0.9, 1.1)
    std: float = 0.05
    draws_per_mean: int = 30
    seed: int = 0
    clamp_lo: float = 0.5

    def __post_init__(self):
        self.means = tuple(float(m) for m in self.means)
        if not self.std > 0:
            raise ValueError("std must be positive")
        if any(m <= 0 for m in self.means):
            raise ValueError("means must be positive")
        if self.draws_per_mean < 1:
            raise ValueError("draws_per_mean must be at least 1")

    @property
    def expansion(self) -> int:
        return len(self.means) * self.draws_per_mean


def perturbation_multipliers(config: PerturbationConfig, rng: np.random.Generator) -> np.ndarray:
    """Multiplier vectors, shape (len(means) * draws_per_mean, 7), grouped by mean."""
    blocks = [rng.normal(m, config.std, size=(config.draws_per_mean, len(AGING_FIELDS))) for m in config.means]
    return np.maximum(np.concatenate(blocks), config.clamp_lo)


def perturb_parameters(base: AgingParameterSet, config: PerturbationConfig, index: int | None = None) -> list[AgingParameterSet]:
    """Expand one base set into ``3 * draws_per_mean`` perturbed sets.  With
    ``index`` the stream is derived from (seed, index) so many bases can be
    expanded independently."""
    key = config.seed if index is None else [config.seed, index]
    rng = np.random.default_rng(np.random.SeedSequence(key))
    mult = perturbation_multipliers(config, rng)
    arr = base.as_array()
    return [AgingParameterSet.from_array(arr * m) for m in mult]


def perturb_many(bases, config: PerturbationConfig) -> list[AgingParameterSet]:
    out = []
    for i, b in enumerate(bases):
        out.extend(perturb_parameters(b, config, index=i))
    return out


# ---------------------------------------------------------------- fade trajectories

# (a, b, c, d, e, f): eps *= 1 - a x^b ; D, k *= 1 - c x^d ; R0 *= 1 + e x^f, x = n / N
FADE_PRESETS = {
    "mild": (0.08, 1.0, 0.20, 1.0, 0.30, 1.0),
    "moderate": (0.15, 1.1, 0.35, 1.0, 0.60, 1.2),
    "severe": (0.26, 1.2, 0.50, 1.0, 1.00, 1.5),
}
# shapes kept out of the training presets (used for held-out target cells)
HELDOUT_PRESETS = {
    "knee": (0.22, 2.4, 0.40, 2.0, 1.40, 2.5),
    "early": (0.18, 0.6, 0.30, 0.7, 0.50, 0.8),
    "cathode": (0.20, 1.0, 0.45, 1.2, 0.80, 1.0),
}
_ALL_PRESETS = {**FADE_PRESETS, **HELDOUT_PRESETS}
_JITTER = 0.05  # relative spread of the preset coefficients per trajectory
_CYCLE_NOISE = 2e-4  # relative per-cycle noise on active-material fractions


def fade_aging(pristine: AgingParameterSet, coeffs, x: float, eps_weights=(1.0, 1.0)) -> AgingParameterSet:
    a, b, c, d, e, f = coeffs
    eps = 1.0 - a * x**b
    kin = 1.0 - c * x**d
    arr = pristine.as_array() * np.array([
        1.0 - eps_weights[0] * (1.0 - eps), 1.0 - eps_weights[1] * (1.0 - eps),
        kin, kin, kin, kin, 1.0 + e * x**f,
    ])
    return AgingParameterSet.from_array(arr)


def synth_fade_trajectory(kind: str, n_cycles: int, base: CellParameters, seed: int = 0,
                          rest_recovery: bool = False, min_soh: float = 0.5) -> AgingTrajectory:
    """Smooth parametric fade over ``n_cycles`` cycles (entries 0..n_cycles-1),
    with seeded jitter of the preset coefficients and tiny per-cycle noise.
    ``rest_recovery`` adds a transient capacity bump at 70% of life."""
    if n_cycles < 10:
        raise ValueError("n_cycles must be at least 10")
    if kind not in _ALL_PRESETS:
        raise ValueError(f"unknown fade kind {kind!r}; choose from {sorted(_ALL_PRESETS)}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, sum(map(ord, kind))]))
    coeffs = np.array(_ALL_PRESETS[kind]) * (1.0 + _JITTER * rng.uniform(-1, 1, 6))
    split = rng.uniform(0.8, 1.2)  # anode/cathode loss balance
    weights = (split, 2.0 - split) if kind != "cathode" else (1.6, 0.4)
    pristine = AgingParameterSet.from_params(base)
    traj = AgingTrajectory(name=f"{kind}-{seed}")
    for n in range(n_cycles):
        x = n / (n_cycles - 1)
        if rest_recovery:
            bump = 0.03 * math.exp(-((x - 0.7) / 0.03) ** 2) if x >= 0.7 else 0.0
            x = max(0.0, x - bump)
        aging = fade_aging(pristine, coeffs, x, weights)
        if n > 0:
            noise = np.ones(7)
            noise[:2] += _CYCLE_NOISE * rng.standard_normal(2)
            aging = aging.scaled(noise)
        cap = reference_capacity(base, aging)
        if cap / NOMINAL_CAPACITY_AH < min_soh:
            log.info("%s trajectory truncated at cycle %d (SOH below %.0f%%)", kind, n, 100 * min_soh)
            break
        traj.append(n, aging, cap)
    return traj


# ---------------------------------------------------------------- segments


@dataclass
class Segment:
    """A 1.5 Ah throughput window resampled at 25 points (raw V in volts, I in amps)."""

    source: tuple  # (cell id, cycle, param-set id)
    start_throughput: float
    samples25: np.ndarray  # (25, 2): voltage, current
    label_capacity: float
    raw_charge: float = float("nan")

    @property
    def label_soh(self) -> float:
        return self.label_capacity / NOMINAL_CAPACITY_AH


def window_count(total_q: float, delta_q: float = DELTA_Q, stride_q: float = STRIDE_Q) -> int:
    if total_q < delta_q:
        return 0
    return int(math.floor((total_q - delta_q) / stride_q + 1e-9)) + 1


def segment_trace(trace, delta_q: float = DELTA_Q, stride_q: float = STRIDE_Q, label: float | None = None,
                  source=(0, 0, 0), n_points: int = N_POINTS, select=None) -> list[Segment]:
    """Sliding throughput windows of ``delta_q`` starting at 0, every
    ``stride_q``; windows past the end of charge are dropped.  ``select``
    restricts the output to the given window indices."""
    q = np.asarray(trace.throughput, dtype=float)
    if q.size < 2 or q[-1] < delta_q:
        return []
    v = np.asarray(trace.voltage, dtype=float)
    i = np.asarray(trace.current, dtype=float)
    label = trace.final_capacity if label is None else label
    n_win = window_count(q[-1], delta_q, stride_q)
    # charge-carrying samples for the current channel (sample k holds the current of interval k)
    charging = np.flatnonzero(np.diff(q) > 0) + 1
    qi, ii = q[charging], i[charging]
    out = []
    for w in range(n_win) if select is None else select:
        s = w * stride_q
        grid = np.linspace(s, s + delta_q, n_points)
        # voltage on the strictly increasing part of the throughput axis
        keep = np.concatenate(([0], charging))
        vs = np.interp(grid, q[keep], v[keep])
        cs = np.interp(grid, qi, ii)
        # raw slice: from the last sample at or before the start to the sample nearest start + delta_q
        j0 = max(0, int(np.searchsorted(q, s, side="right")) - 1)
        j1 = int(np.searchsorted(q, q[j0] + delta_q))
        if j1 >= q.size or (j1 > j0 + 1 and q[j0] + delta_q - q[j1 - 1] < q[j1] - q[j0] - delta_q):
            j1 -= 1
        out.append(Segment(tuple(int(x) for x in source), s, np.column_stack([vs, cs]), float(label),
                           float(q[j1] - q[j0])))
    return out


def pack_segment(seg: Segment) -> np.ndarray:
    """(5, 5, 2) tensor: normalized voltage channel then current channel,
    each filled row-major in throughput order."""
    s = np.asarray(seg.samples25, dtype=float)
    if s.shape != (N_POINTS, 2):
        raise ValueError(f"expected ({N_POINTS}, 2) samples, got {s.shape}")
    if not np.all(np.isfinite(s)):
        raise ValueError("segment has non-finite samples")
    vn = (s[:, 0] - V_LO) / (V_HI - V_LO)
    cn = s[:, 1] / I_SCALE
    return np.stack([vn.reshape(5, 5), cn.reshape(5, 5)], axis=-1)


def unpack_tensor(tensor: np.ndarray) -> np.ndarray:
    t = np.asarray(tensor, dtype=float)
    v = t[..., 0].reshape(-1) * (V_HI - V_LO) + V_LO
    c = t[..., 1].reshape(-1) * I_SCALE
    return np.column_stack([v, c])


def _planes(seg: Segment) -> np.ndarray:
    t = pack_segment(seg)
    return np.concatenate([t[..., 0].ravel(), t[..., 1].ravel()]).astype(np.float32)


# ---------------------------------------------------------------- dataset


class SegmentDataset:
    """Columnar segment store.  ``planes`` is (N, 2, 5, 5) float32 (channel first)."""

    def __init__(self, ids=None, start_q=None, labels=None, planes=None):
        self.ids = np.zeros((0, 3), np.uint32) if ids is None else np.asarray(ids, np.uint32).reshape(-1, 3)
        self.start_q = np.zeros(0) if start_q is None else np.asarray(start_q, np.float64)
        self.labels = np.zeros(0) if labels is None else np.asarray(labels, np.float64)
        self.planes = np.zeros((0, 2, 5, 5), np.float32) if planes is None else np.asarray(planes, np.float32).reshape(-1, 2, 5, 5)
        n = len(self.labels)
        if not (len(self.ids) == len(self.start_q) == n == len(self.planes)):
            raise ValueError("dataset columns differ in length")

    def __len__(self):
        return len(self.labels)

    @classmethod
    def from_segments(cls, segments) -> "SegmentDataset":
        segments = list(segments)
        if not segments:
            return cls()
        return cls(
            [s.source for s in segments], [s.start_throughput for s in segments],
            [s.label_capacity for s in segments], np.stack([_planes(s) for s in segments]),
        )

    @classmethod
    def concat(cls, parts) -> "SegmentDataset":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls()
        return cls(np.concatenate([p.ids for p in parts]), np.concatenate([p.start_q for p in parts]),
                   np.concatenate([p.labels for p in parts]), np.concatenate([p.planes for p in parts]))

    def subset(self, idx) -> "SegmentDataset":
        idx = np.asarray(idx)
        return SegmentDataset(self.ids[idx], self.start_q[idx], self.labels[idx], self.planes[idx])

    def tensors(self) -> np.ndarray:
        """(N, 5, 5, 2) channel-last view as packed by :func:`pack_segment`."""
        return np.moveaxis(self.planes, 1, -1)

    @property
    def soh(self) -> np.ndarray:
        return self.labels / NOMINAL_CAPACITY_AH

    def __eq__(self, other):
        if not isinstance(other, SegmentDataset):
            return NotImplemented
        return (np.array_equal(self.ids, other.ids) and np.array_equal(self.start_q, other.start_q)
                and np.array_equal(self.labels, other.labels) and np.array_equal(self.planes, other.planes))

    def to_bytes(self) -> bytes:
        rec = np.zeros(len(self), dtype=_RECORD)
        rec["ids"] = self.ids
        rec["start_q"] = self.start_q
        rec["label"] = self.labels
        rec["planes"] = self.planes.reshape(-1, 50)
        payload = _HEADER.pack(len(self), VERSION, V_LO, V_HI - V_LO, I_SCALE, NOMINAL_CAPACITY_AH, DELTA_Q) + rec.tobytes()
        return MAGIC + payload + hashlib.blake2b(payload, digest_size=8).digest()

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def write_dataset(dataset, path) -> str:
    """Write atomically; returns the file's sha256."""
    if not isinstance(dataset, SegmentDataset):
        dataset = SegmentDataset.from_segments(dataset)
    data = dataset.to_bytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return hashlib.sha256(data).hexdigest()


def read_dataset(path) -> SegmentDataset:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + _HEADER.size + 8 or data[: len(MAGIC)] != MAGIC:
        raise DatasetError(f"{path}: not a segment dataset")
    payload, check = data[len(MAGIC):-8], data[-8:]
    if hashlib.blake2b(payload, digest_size=8).digest() != check:
        raise DatasetError(f"{path}: checksum mismatch (truncated or corrupted)")
    count, version, v_lo, v_span, i_scale, nominal, delta_q = _HEADER.unpack_from(payload)
    if version != VERSION:
        raise DatasetError(f"{path}: unsupported version {version}")
    if (v_lo, v_span, i_scale) != (V_LO, V_HI - V_LO, I_SCALE):
        raise DatasetError(f"{path}: normalization constants differ from this build")
    body = payload[_HEADER.size:]
    if len(body) != count * _RECORD.itemsize:
        raise DatasetError(f"{path}: record block has the wrong size")
    rec = np.frombuffer(body, dtype=_RECORD, count=count)
    return SegmentDataset(rec["ids"].copy(), rec["start_q"].copy(), rec["label"].copy(), rec["planes"].copy())


# ---------------------------------------------------------------- corpus


@dataclass
class SimConfig:
    seed: int = 0
    dt: float = 1.0
    soc0_range: tuple = (0.0, 0.3)
    delta_q: float = DELTA_Q
    stride_q: float = STRIDE_Q
    solid: str = "pade"
    keep_per_set: int | None = None  # seeded subsample of each trace's windows
    cap: int | None = None  # total segment cap, seeded subsample
    workers: int = 1


@dataclass
class CorpusHandle:
    dataset: SegmentDataset
    n_sets: int
    skipped: list = field(default_factory=list)
    path: Path | None = None
    digest: str = ""

    def __len__(self):
        return len(self.dataset)


def _simulate_one(job):
    index, params, aging, ids, protocol, cfg = job
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, index]))
    soc0 = float(rng.uniform(*cfg.soc0_range))
    try:
        trace = simulate_protocol(params, aging, protocol, soc0, dt=cfg.dt, solid=cfg.solid)
    except (SimulationError, ValueError) as exc:
        return index, None, f"{type(exc).__name__}: {exc}"
    select = None
    n_win = window_count(float(trace.throughput[-1]), cfg.delta_q, cfg.stride_q)
    if cfg.keep_per_set is not None and n_win > cfg.keep_per_set:
        select = np.sort(rng.choice(n_win, cfg.keep_per_set, replace=False))
    segs = segment_trace(trace, cfg.delta_q, cfg.stride_q, source=ids, select=select)
    return index, SegmentDataset.from_segments(segs), None


def _normalize_sets(param_sets):
    out = []
    for k, item in enumerate(param_sets):
        if len(item) == 3:
            params, aging, ids = item
        else:
            (params, aging), ids = item, (0, 0, k)
        out.append((params, aging, tuple(int(x) for x in ids)))
    return out


def generate_corpus(param_sets, protocol: Protocol, sim_config: SimConfig | None = None, path=None) -> CorpusHandle:
    """Simulate a charge per parameter set and collect its segments.

    ``param_sets`` holds ``(params, aging)`` or ``(params, aging, ids)``
    tuples.  Results are assembled in set order whatever the worker count,
    so the corpus depends only on the inputs and the master seed.
    """
    cfg = sim_config or SimConfig()
    sets = _normalize_sets(param_sets)
    if not sets:
        raise ValueError("no parameter sets given")
    jobs = [(k, p, a, ids, protocol, cfg) for k, (p, a, ids) in enumerate(sets)]
    if cfg.workers > 1:
        ctx = mp.get_context("fork")
        with ctx.Pool(cfg.workers) as pool:
            results = list(pool.imap(_simulate_one, jobs, chunksize=max(1, len(jobs) // (8 * cfg.workers))))
    else:
        results = [_simulate_one(j) for j in jobs]
    parts, skipped = [], []
    for index, ds, err in results:
        if ds is None:
            log.warning("parameter set %d skipped: %s", index, err)
            skipped.append((index, err))
        else:
            parts.append(ds)
    dataset = SegmentDataset.concat(parts)
    if cfg.cap is not None and len(dataset) > cfg.cap:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xCA9]))
        dataset = dataset.subset(np.sort(rng.choice(len(dataset), cfg.cap, replace=False)))
    if skipped:
        log.info("%d of %d parameter sets skipped", len(skipped), len(sets))
    handle = CorpusHandle(dataset, len(sets), skipped)
    if path is not None:
        handle.digest = write_dataset(dataset, path)
        handle.path = Path(path)
    else:
        handle.digest = dataset.digest()
    return handle


def expand_trajectories(trajectories, base: CellParameters, config: PerturbationConfig, cell_offset: int = 0):
    """Perturbation expansion of every trajectory entry into (params, aging, ids) jobs."""
    jobs = []
    k = 0
    for t, traj in enumerate(trajectories):
        for entry in traj:
            for aging in perturb_parameters(entry.aging, config, index=k):
                jobs.append((base, aging, (cell_offset + t, entry.cycle, len(jobs))))
            k += 1
    return jobs
