"""Parameter estimation with the adaptive swarm: stoichiometric windows from
OCV, pristine parameters from multi-rate curves, and per-cycle aging
parameters chained across life."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import _kernels as K
from .apso import ApsoConfig, optimize
from .cell import (
    CV_TOLERANCE_V,
    SimTrace,
    assemble_model,
    init_state,
    reference_capacity,
)
from .params import (
    AGING_FIELDS,
    NOMINAL_CAPACITY_AH,
    AgingParameterSet,
    CellParameters,
    OcpTable,
    ParameterError,
    electrode_capacity,
)

log = logging.getLogger(__name__)

CV_WEIGHT_MV_PER_A = 10.0
FAIL_RESIDUAL_MV = 1000.0


class NonConvergence(RuntimeError):
    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


@dataclass
class MeasuredCurve:
    """Measured samples.  For ``kind="ocv"`` x is SOC and y the OCV; for
    ``kind="cycle_voltage"`` x is time (s, uniform spacing), y the terminal
    voltage and ``current`` the applied current (charge positive)."""

    x: np.ndarray
    y: np.ndarray
    kind: str = "cycle_voltage"
    current: np.ndarray | None = None
    is_cv: np.ndarray | None = None
    rate: float = float("nan")
    cycle: int = 0
    cell_id: str = ""
    soc0: float = 0.0
    v_max: float = 4.2

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.x.shape != self.y.shape or self.x.ndim != 1:
            raise ValueError("x and y must be 1-d and of equal length")
        if np.any(np.diff(self.x) <= 0):
            raise ValueError("x must be strictly increasing")
        if self.kind not in ("ocv", "cycle_voltage"):
            raise ValueError(f"unknown curve kind {self.kind!r}")
        if self.kind == "cycle_voltage":
            if self.current is None:
                raise ValueError("cycle curves need a current column")
            self.current = np.asarray(self.current, dtype=float)
            if self.is_cv is None:
                self.is_cv = infer_cv(self.y, self.current, self.v_max)
            self.is_cv = np.asarray(self.is_cv, dtype=bool)

    def __len__(self):
        return self.x.size

    @property
    def dt(self) -> float:
        steps = np.diff(self.x)
        if not np.allclose(steps, steps[0], rtol=1e-6, atol=1e-9):
            raise ValueError("cycle curves must be uniformly sampled")
        return float(steps[0])

    @classmethod
    def from_trace(cls, trace: SimTrace, rate=float("nan"), cycle=0, cell_id="", soc0=None):
        return cls(trace.t, trace.voltage, "cycle_voltage", trace.current, trace.is_cv, rate, cycle,
                   cell_id, trace.meta.get("soc0", 0.0) if soc0 is None else soc0)

    @classmethod
    def read_csv(cls, path, **meta) -> "MeasuredCurve":
        path = Path(path)
        with open(path) as fh:
            header = fh.readline().strip().replace(" ", "")
            if header != "t_s,current_A,voltage_V":
                raise ParameterError(f"{path}: expected header 't_s,current_A,voltage_V'")
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
        return cls(data[:, 0], data[:, 2], "cycle_voltage", data[:, 1], **meta)

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("t_s,current_A,voltage_V\n")
            for t, i, v in zip(self.x, self.current, self.y):
                fh.write(f"{float(t)!r},{float(i)!r},{float(v)!r}\n")


def infer_cv(voltage, current, v_max=4.2, tol=2e-3):
    """Flag samples held at ``v_max`` under charge as the CV phase."""
    voltage = np.asarray(voltage)
    current = np.asarray(current)
    at = (np.abs(voltage - v_max) <= tol) & (current > 0)
    # a hold needs the previous sample at or above v_max; the first hit ends a CC interval
    flag = np.zeros_like(at)
    flag[1:] = at[1:] & (voltage[:-1] >= v_max - tol)
    return flag


# ---------------------------------------------------------------- stoichiometry


@dataclass
class StoichiometryFit:
    theta_p_0: float
    theta_p_100: float
    theta_n_0: float
    theta_n_100: float
    rmse_mV: float
    capacity_ratio: float = float("nan")  # cathode / anode theoretical capacity when params given
    history: np.ndarray = field(default=None, repr=False)

    def astuple(self):
        return self.theta_p_0, self.theta_p_100, self.theta_n_0, self.theta_n_100


def _ocv_rmse_batch(pos, soc, v_meas, ocp_p: OcpTable, ocp_n: OcpTable):
    tp0, tp100, tn0, tn100 = (pos[:, i:i + 1] for i in range(4))
    tp = tp0 - soc[None, :] * (tp0 - tp100)
    tn = tn0 + soc[None, :] * (tn100 - tn0)
    v = ocp_p(tp.ravel()).reshape(tp.shape) - ocp_n(tn.ravel()).reshape(tn.shape)
    rmse = np.sqrt(np.mean((v - v_meas[None, :]) ** 2, axis=1))
    # ordering penalty, volts per unit of violation
    viol = np.maximum(0.0, tp100 - tp0 + 0.05)[:, 0] + np.maximum(0.0, tn0 - tn100 + 0.05)[:, 0]
    return rmse + 10.0 * viol


def fit_stoichiometry(ocv_curve: MeasuredCurve, ocp_p: OcpTable, ocp_n: OcpTable,
                      config: ApsoConfig | None = None, params: CellParameters | None = None,
                      tol_mV: float = 20.0) -> StoichiometryFit:
    """Fit the four stoichiometric window ends to an OCV-vs-SOC curve."""
    if ocv_curve.kind != "ocv":
        raise ValueError("fit_stoichiometry needs an OCV curve")
    soc, v = ocv_curve.x, ocv_curve.y
    if soc[0] > 0.02 or soc[-1] < 0.98:
        raise ValueError("OCV curve must span the full SOC window")
    if config is None:
        config = ApsoConfig(bounds=[[0, 1]] * 4, max_iters=300, seed=0)
    res = optimize(lambda p: _ocv_rmse_batch(p, soc, v, ocp_p, ocp_n), config, vectorized=True)
    tp0, tp100, tn0, tn100 = (float(t) for t in res.best_position)
    rmse = float(_ocv_rmse_batch(res.best_position[None, :], soc, v, ocp_p, ocp_n)[0]) * 1e3
    ratio = float("nan")
    if params is not None:
        fitted = replace(params, theta_p_0=tp0, theta_p_100=tp100, theta_n_0=tn0, theta_n_100=tn100)
        ratio = electrode_capacity(fitted, "cathode") / electrode_capacity(fitted, "anode")
    fit = StoichiometryFit(tp0, tp100, tn0, tn100, rmse, ratio, res.history)
    if rmse > tol_mV:
        raise NonConvergence(f"OCV fit RMSE {rmse:.2f} mV exceeds {tol_mV} mV", fit)
    return fit


# ---------------------------------------------------------------- replay fitness


def replay_residuals(params: CellParameters, aging: AgingParameterSet | None, curve: MeasuredCurve,
                     solid: str = "pade") -> np.ndarray:
    """Per-sample residuals in mV: voltage error on imposed-current samples,
    current error weighted 10 mV/A on CV samples."""
    model = assemble_model(params, aging, curve.dt, solid)
    x0 = init_state(params, curve.soc0, solid=solid).packed()
    v, i, n_done, status = K.run_replay(
        x0, *model.kernel_args(), np.ascontiguousarray(curve.current), curve.is_cv,
        float(curve.v_max), CV_TOLERANCE_V,
    )
    res = np.empty(len(curve))
    cc = ~curve.is_cv
    res[cc] = (v[cc] - curve.y[cc]) * 1e3
    res[~cc] = (i[~cc] - curve.current[~cc]) * CV_WEIGHT_MV_PER_A
    if status != K.ST_OK:
        res[n_done:] = FAIL_RESIDUAL_MV
    res[~np.isfinite(res)] = FAIL_RESIDUAL_MV
    return res


def curve_rmse(params, aging, curve, solid="pade") -> float:
    r = replay_residuals(params, aging, curve, solid)
    return float(np.sqrt(np.mean(r**2)))


# ---------------------------------------------------------------- pristine


PRISTINE_FREE = ("eps_s_n", "eps_s_p", "c_max_n", "c_max_p", "r0", "d_e", "d_s_n", "d_s_p", "k_n", "k_p")
_LOG_FIELDS = {"d_e", "d_s_n", "d_s_p", "k_n", "k_p"}


def default_pristine_bounds(guess: CellParameters, free=PRISTINE_FREE) -> dict:
    out = {}
    for name in free:
        v = getattr(guess, name)
        out[name] = (v / 10.0, v * 10.0) if name in _LOG_FIELDS else (0.7 * v, 1.3 * v)
    if "eps_s_n" in out:
        out["eps_s_n"] = (out["eps_s_n"][0], min(out["eps_s_n"][1], 1 - guess.eps_e_n - 1e-3))
    if "eps_s_p" in out:
        out["eps_s_p"] = (out["eps_s_p"][0], min(out["eps_s_p"][1], 1 - guess.eps_e_p - 1e-3))
    return out


class _Coder:
    """Maps physical parameter values to the search box (log10 for rate-like ones)."""

    def __init__(self, names, bounds: dict):
        self.names = tuple(names)
        self.log = np.array([n in _LOG_FIELDS for n in self.names])
        lo = np.array([bounds[n][0] for n in self.names], dtype=float)
        hi = np.array([bounds[n][1] for n in self.names], dtype=float)
        self.box = np.column_stack([np.where(self.log, np.log10(lo), lo), np.where(self.log, np.log10(hi), hi)])

    def decode(self, z):
        z = np.asarray(z, dtype=float)
        return np.where(self.log, 10.0**z, z)

    def encode(self, values):
        values = np.asarray(values, dtype=float)
        return np.where(self.log, np.log10(values), values)


@dataclass
class PristineResult:
    params: CellParameters
    curve_rmse_mV: list
    combined_rmse_mV: float
    history: np.ndarray = field(repr=False, default=None)


def identify_pristine(curves: list[MeasuredCurve], fixed: CellParameters, config: ApsoConfig | None = None,
                      free=PRISTINE_FREE, bounds: dict | None = None, tol_mV: float = 25.0,
                      map_fn=None) -> PristineResult:
    """Fit the identification-flagged parameters to multi-rate cycle curves.

    ``fixed`` supplies geometry, electrolyte properties, OCP tables and the
    stoichiometric windows; its values of the free parameters seed the
    default search box.
    """
    rates = {round(c.rate, 6) for c in curves if math.isfinite(c.rate)}
    if len(curves) < 2 or len(rates) < 2:
        raise ValueError("pristine identification needs curves at two or more rates")
    coder = _Coder(free, bounds or default_pristine_bounds(fixed, free))
    if config is None:
        config = ApsoConfig(bounds=coder.box, max_iters=60, n_particles=60, seed=0)
    else:
        config = replace(config, bounds=coder.box)

    def make(z):
        return replace(fixed, **dict(zip(coder.names, (float(v) for v in coder.decode(z)))))

    def fitness(z):
        try:
            p = make(z)
        except ParameterError:
            return math.inf
        return float(np.mean([curve_rmse(p, None, c) for c in curves]))

    res = optimize(fitness, config, init_positions=coder.encode([getattr(fixed, n) for n in coder.names]),
                   map_fn=map_fn)
    best = make(res.best_position)
    per = [curve_rmse(best, None, c) for c in curves]
    out = PristineResult(best, per, float(np.mean(per)), res.history)
    if out.combined_rmse_mV > tol_mV:
        raise NonConvergence(f"pristine fit RMSE {out.combined_rmse_mV:.2f} mV exceeds {tol_mV} mV", out)
    return out


# ---------------------------------------------------------------- aging


@dataclass
class AgingFit:
    aging: AgingParameterSet
    rmse_mV: float
    history: np.ndarray = field(repr=False, default=None)

    def __iter__(self):
        return iter((self.aging, self.rmse_mV))


def identify_aging(cycle_curve: MeasuredCurve | list, base: CellParameters, warm_start: AgingParameterSet,
                   config: ApsoConfig | None = None, free=AGING_FIELDS, span: float = 0.5,
                   tol_mV: float = 25.0, map_fn=None) -> AgingFit:
    """Fit the aging parameters to one cycle's curve(s).

    Search box is ``warm_start * [1 - span, 1 + span]`` per free parameter;
    parameters not in ``free`` stay at the warm-start value.  Rate-like
    parameters are searched in log space.
    """
    curves = cycle_curve if isinstance(cycle_curve, (list, tuple)) else [cycle_curve]
    free = tuple(free)
    unknown = set(free) - set(AGING_FIELDS)
    if unknown:
        raise ValueError(f"unknown aging parameters {sorted(unknown)}")
    ws = warm_start.as_array()
    idx = [AGING_FIELDS.index(n) for n in free]
    bounds = {n: (ws[i] * (1 - span), ws[i] * (1 + span)) for n, i in zip(free, idx)}
    coder = _Coder(free, bounds)
    if config is None:
        config = ApsoConfig(bounds=coder.box, max_iters=60, n_particles=40, seed=0)
    else:
        config = replace(config, bounds=coder.box)

    def make(z):
        arr = ws.copy()
        arr[idx] = coder.decode(z)
        return AgingParameterSet.from_array(arr)

    def fitness(z):
        try:
            a = make(z)
            return float(np.mean([curve_rmse(base, a, c) for c in curves]))
        except ParameterError:
            return math.inf

    res = optimize(fitness, config, init_positions=coder.encode(ws[idx]), map_fn=map_fn)
    aging = make(res.best_position)
    fit = AgingFit(aging, float(res.best_fitness), res.history)
    if fit.rmse_mV > tol_mV:
        raise NonConvergence(f"aging fit RMSE {fit.rmse_mV:.2f} mV exceeds {tol_mV} mV", fit)
    return fit


@dataclass
class TrajectoryEntry:
    cycle: int
    aging: AgingParameterSet
    capacity: float
    soh: float


@dataclass
class AgingTrajectory:
    entries: list = field(default_factory=list)
    name: str = ""

    def append(self, cycle: int, aging: AgingParameterSet, capacity: float, nominal: float = NOMINAL_CAPACITY_AH):
        if self.entries and cycle <= self.entries[-1].cycle:
            raise ValueError("cycles must be strictly increasing")
        self.entries.append(TrajectoryEntry(int(cycle), aging, float(capacity), float(capacity) / nominal))

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def cycles(self) -> np.ndarray:
        return np.array([e.cycle for e in self.entries])

    @property
    def capacities(self) -> np.ndarray:
        return np.array([e.capacity for e in self.entries])

    @property
    def soh(self) -> np.ndarray:
        return np.array([e.soh for e in self.entries])

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(",".join(("cycle",) + AGING_FIELDS + ("capacity_Ah", "soh")) + "\n")
            for e in self.entries:
                vals = [repr(float(v)) for v in e.aging.as_array()]
                fh.write(",".join([str(e.cycle), *vals, repr(e.capacity), repr(e.soh)]) + "\n")

    @classmethod
    def read_csv(cls, path, name: str = "") -> "AgingTrajectory":
        traj = cls(name=name)
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            if header[1:8] != list(AGING_FIELDS):
                raise ParameterError(f"{path}: unexpected trajectory header")
            for line in fh:
                if not line.strip():
                    continue
                parts = line.strip().split(",")
                e = TrajectoryEntry(int(parts[0]), AgingParameterSet.from_array([float(p) for p in parts[1:8]]),
                                    float(parts[8]), float(parts[9]))
                traj.entries.append(e)
        return traj


def identify_trajectory(curves: list[MeasuredCurve], base: CellParameters, warm_start: AgingParameterSet,
                        config: ApsoConfig | None = None, **kwargs) -> tuple[AgingTrajectory, list[float]]:
    """Sequential per-cycle identification; each cycle warm-starts the next."""
    traj = AgingTrajectory()
    rmses = []
    current = warm_start
    for curve in sorted(curves, key=lambda c: c.cycle):
        fit = identify_aging(curve, base, current, config, **kwargs)
        current = fit.aging
        traj.append(curve.cycle, current, reference_capacity(base, current))
        rmses.append(fit.rmse_mV)
        log.info("cycle %d: rmse %.2f mV", curve.cycle, fit.rmse_mV)
    return traj, rmses
