"""Reduced-order electrochemical cell: single particle per electrode with
electrolyte dynamics.

Terminal voltage (charging current positive)::

    V = U_p(th_p,surf) - U_n(th_n,surf) + eta_p - eta_n + dphi_e + I*R0
    eta = (2RT/F) asinh(j / (2 j0)),   j0 = F k sqrt(c_e c_s (c_max - c_s))
    dphi_e = 2RT(1 - t+)/F ln(c_e,p / c_e,n) + I*R_e

Linear subsystems are advanced by their exact zero-order-hold discretization,
so a model is a fixed set of matrices per (parameters, aging, dt).
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .diffusion import (
    discretize,
    electrolyte_continuous,
    electrolyte_resistance,
    fdm_solid_continuous,
    pade_solid_discrete,
)
from .params import (
    FARADAY,
    NOMINAL_CAPACITY_AH,
    AgingParameterSet,
    CellParameters,
    electrode_capacity,
)
from .protocols import C_RATE_GUARD, Protocol, make_cccv, make_discharge

CV_TOLERANCE_V = 1e-8
V_SANITY = (2.0, 4.3)


class SimulationError(RuntimeError):
    def __init__(self, message: str, time: float | None = None):
        super().__init__(message if time is None else f"{message} (t = {time:g} s)")
        self.time = time


class SurfaceSaturation(SimulationError):
    """A surface stoichiometry left (0, 1): over-charge or over-discharge."""


class NonFinite(SimulationError):
    pass


class NoRoot(SimulationError):
    """No current reaches the requested CV voltage."""


def compute_capacity(params: CellParameters, side: str) -> float:
    """Usable capacity (Ah) of the anode or cathode stoichiometric window."""
    return electrode_capacity(params, side)


def stoichiometry_at_soc(params: CellParameters, soc):
    theta_n = params.theta_n_0 + soc * (params.theta_n_100 - params.theta_n_0)
    theta_p = params.theta_p_0 - soc * (params.theta_p_0 - params.theta_p_100)
    return theta_n, theta_p


def ocv_at_soc(params: CellParameters, soc):
    soc_arr = np.asarray(soc, dtype=float)
    if np.any(soc_arr < 0) or np.any(soc_arr > 1):
        raise ValueError("soc must lie in [0, 1]")
    theta_n, theta_p = stoichiometry_at_soc(params, soc_arr)
    ocv = params.ocp_p(theta_p) - params.ocp_n(theta_n)
    return float(ocv) if np.ndim(ocv) == 0 else ocv


# ---------------------------------------------------------------- model matrices


@dataclass(frozen=True, eq=False)
class DiscreteModel:
    ad: np.ndarray
    bd: np.ndarray
    cout: np.ndarray
    dout: np.ndarray
    yoff: np.ndarray
    scalars: np.ndarray
    ocp: tuple
    dt: float
    n_solid_n: int
    n_solid_p: int
    solid: str
    bulk_rows: tuple  # (row_n, row_p) of cout giving bulk concentration

    @property
    def n_states(self) -> int:
        return self.ad.shape[0]

    def kernel_args(self):
        return (self.ad, self.bd, self.cout, self.dout, self.yoff, self.scalars, *self.ocp)


def _electrode_gain(params: CellParameters, side: str) -> tuple[float, float]:
    """(total interfacial area a*A*L in m^2, amps -> outward molar flux gain)."""
    if side == "n":
        area = 3 * params.eps_s_n / params.r_n * params.plate_area * params.l_n
        return area, -1.0 / (FARADAY * area)
    area = 3 * params.eps_s_p / params.r_p * params.plate_area * params.l_p
    return area, 1.0 / (FARADAY * area)


@functools.lru_cache(maxsize=64)
def _electrolyte_discrete(params: CellParameters, dt: float):
    a, b = electrolyte_continuous(params)
    return discretize(a, b, dt)


def _solid_block(params, side, dt, solid, nodes):
    radius = params.r_n if side == "n" else params.r_p
    diff = params.d_s_n if side == "n" else params.d_s_p
    _, gain = _electrode_gain(params, side)
    if solid == "pade":
        ad, bd, c_surf, c_bulk = pade_solid_discrete(radius, diff, gain, dt)
        return ad, bd, c_surf, 0.0, c_bulk
    if solid == "fdm":
        a, b, c_surf, d_surf, c_bulk = fdm_solid_continuous(radius, diff, gain, nodes)
        ad, bd = discretize(a, b, dt)
        return ad, bd, c_surf, d_surf, c_bulk
    raise ValueError(f"unknown solid diffusion model {solid!r}")


def assemble_model(params: CellParameters, aging: AgingParameterSet | None = None,
                   dt: float = 1.0, solid: str = "pade", fdm_nodes: int = 50) -> DiscreteModel:
    """Build the discrete model without caching (used inside optimizers)."""
    p = params.with_aging(aging)
    an, bn, csn, dsn, cbn = _solid_block(p, "n", dt, solid, fdm_nodes)
    ap, bp, csp, dsp, cbp = _solid_block(p, "p", dt, solid, fdm_nodes)
    ae, be = _electrolyte_discrete(params, float(dt))
    nn, npp = an.shape[0], ap.shape[0]
    n = nn + npp + 2
    ad = np.zeros((n, n))
    bd = np.zeros(n)
    ad[:nn, :nn] = an
    ad[nn:nn + npp, nn:nn + npp] = ap
    ad[nn + npp:, nn + npp:] = ae
    bd[:nn] = bn
    bd[nn:nn + npp] = bp
    bd[nn + npp:] = be
    cout = np.zeros((K.N_OUT, n))
    dout = np.zeros(K.N_OUT)
    yoff = np.zeros(K.N_OUT)
    cout[K.Y_CSURF_N, :nn] = csn
    dout[K.Y_CSURF_N] = dsn
    cout[K.Y_CSURF_P, nn:nn + npp] = csp
    dout[K.Y_CSURF_P] = dsp
    cout[K.Y_CE_N, nn + npp] = 1.0
    cout[K.Y_CE_P, nn + npp + 1] = 1.0
    yoff[K.Y_CE_N] = yoff[K.Y_CE_P] = p.c_e_init
    cout[K.Y_CBULK_N, :nn] = cbn
    cout[K.Y_CBULK_P, nn:nn + npp] = cbp
    sc = np.zeros(K.N_SCALARS)
    sc[K.S_CMAX_N] = p.c_max_n
    sc[K.S_CMAX_P] = p.c_max_p
    sc[K.S_K_N] = p.k_n
    sc[K.S_K_P] = p.k_p
    sc[K.S_AREA_N] = _electrode_gain(p, "n")[0]
    sc[K.S_AREA_P] = _electrode_gain(p, "p")[0]
    sc[K.S_R0] = p.r0
    sc[K.S_RE] = electrolyte_resistance(p)
    sc[K.S_TPLUS] = p.t_plus
    sc[K.S_TEMP] = p.temperature
    sc[K.S_THETA_N0] = p.theta_n_0
    sc[K.S_THETA_N100] = p.theta_n_100
    sc[K.S_IGUARD] = C_RATE_GUARD * NOMINAL_CAPACITY_AH
    ocp = (p.ocp_n.theta, p.ocp_n.potential, p.ocp_p.theta, p.ocp_p.potential)
    for arr in (ad, bd, cout, dout, yoff, sc):
        arr.setflags(write=False)
    return DiscreteModel(ad, bd, cout, dout, yoff, sc, ocp, float(dt), nn, npp, solid,
                         (K.Y_CBULK_N, K.Y_CBULK_P))


@functools.lru_cache(maxsize=256)
def build_model(params: CellParameters, aging: AgingParameterSet | None = None,
                dt: float = 1.0, solid: str = "pade", fdm_nodes: int = 50) -> DiscreteModel:
    """Cached :func:`assemble_model`; matrices are read-only and shareable."""
    return assemble_model(params, aging, dt, solid, fdm_nodes)


# ---------------------------------------------------------------- state


@dataclass
class CellState:
    solid_n: np.ndarray
    solid_p: np.ndarray
    electrolyte: np.ndarray
    theta_bulk_n: float
    theta_bulk_p: float
    time: float = 0.0

    @property
    def solid_kind(self) -> str:
        return "pade" if self.solid_n.size == 4 else "fdm"

    def packed(self) -> np.ndarray:
        return np.concatenate([self.solid_n, self.solid_p, self.electrolyte])

    @classmethod
    def unpack(cls, x: np.ndarray, model: DiscreteModel, time: float) -> "CellState":
        nn, npp = model.n_solid_n, model.n_solid_p
        y = model.cout @ x + model.yoff
        return cls(
            solid_n=x[:nn].copy(),
            solid_p=x[nn:nn + npp].copy(),
            electrolyte=x[nn + npp:].copy(),
            theta_bulk_n=float(y[K.Y_CBULK_N] / model.scalars[K.S_CMAX_N]),
            theta_bulk_p=float(y[K.Y_CBULK_P] / model.scalars[K.S_CMAX_P]),
            time=time,
        )


def _model_for(state: CellState | None, params, aging, dt=1.0, solid=None, fdm_nodes=None):
    if solid is None:
        solid = "pade" if state is None else state.solid_kind
    if fdm_nodes is None:
        fdm_nodes = 50 if state is None or solid == "pade" else state.solid_n.size
    return build_model(params, aging, float(dt), solid, int(fdm_nodes))


def init_state(params: CellParameters, soc0: float, aging: AgingParameterSet | None = None,
               solid: str = "pade", fdm_nodes: int = 50) -> CellState:
    """Rested cell at ``soc0``: uniform solid and electrolyte concentrations."""
    if not 0.0 <= soc0 <= 1.0:
        raise ValueError(f"soc0 must lie in [0, 1], got {soc0}")
    theta_n, theta_p = stoichiometry_at_soc(params, soc0)
    if solid == "pade":
        sn = np.array([theta_n * params.c_max_n, 0.0, 0.0, 0.0])
        sp = np.array([theta_p * params.c_max_p, 0.0, 0.0, 0.0])
    elif solid == "fdm":
        sn = np.full(fdm_nodes, theta_n * params.c_max_n)
        sp = np.full(fdm_nodes, theta_p * params.c_max_p)
    else:
        raise ValueError(f"unknown solid diffusion model {solid!r}")
    return CellState(sn, sp, np.zeros(2), float(theta_n), float(theta_p), 0.0)


def surface_stoichiometry(state: CellState, params, aging=None, current: float = 0.0) -> tuple[float, float]:
    model = _model_for(state, params, aging)
    y = model.cout @ state.packed() + model.yoff + model.dout * current
    return y[K.Y_CSURF_N] / model.scalars[K.S_CMAX_N], y[K.Y_CSURF_P] / model.scalars[K.S_CMAX_P]


def terminal_voltage(state: CellState, params: CellParameters, aging: AgingParameterSet | None,
                     current: float) -> float:
    model = _model_for(state, params, aging)
    y = np.empty(K.N_OUT)
    K.outputs(state.packed(), model.cout, model.dout, model.yoff, float(current), y)
    v = K.voltage_from_outputs(y, float(current), model.scalars, *model.ocp)
    if math.isnan(v):
        raise SurfaceSaturation("surface stoichiometry outside (0, 1)", state.time)
    return v


def step(state: CellState, params: CellParameters, aging: AgingParameterSet | None,
         current: float, dt: float = 1.0) -> tuple[CellState, float, float]:
    """Advance by ``dt`` at constant ``current``; returns (state, voltage, soc)."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if abs(current) > C_RATE_GUARD * NOMINAL_CAPACITY_AH + 1e-12:
        raise ValueError(f"|current| {current} A exceeds the {C_RATE_GUARD}C guard")
    model = _model_for(state, params, aging, dt)
    x = state.packed()
    xn = np.empty_like(x)
    K.advance(x, model.ad, model.bd, float(current), xn)
    t = state.time + dt
    if not np.all(np.isfinite(xn)):
        raise NonFinite("state became non-finite", t)
    new = CellState.unpack(xn, model, t)
    y = np.empty(K.N_OUT)
    K.outputs(xn, model.cout, model.dout, model.yoff, float(current), y)
    v = K.voltage_from_outputs(y, float(current), model.scalars, *model.ocp)
    if math.isnan(v):
        raise SurfaceSaturation("surface stoichiometry outside (0, 1)", t)
    return new, v, float(K.soc_from_outputs(y, model.scalars))


def solve_cv_current(state: CellState, params: CellParameters, aging: AgingParameterSet | None,
                     v_target: float, dt: float | None = None, guess: float = 0.0) -> float:
    """Current holding the terminal voltage at ``v_target``.

    With ``dt=None`` the voltage is matched at the present state; with a step
    length it is matched at the end of that step (the form used while
    simulating a CV hold).
    """
    model = _model_for(state, params, aging, 1.0 if dt is None else dt)
    x = state.packed()
    if dt is None:
        y0 = model.cout @ x + model.yoff
        y1 = model.dout.copy()
        i = K.solve_affine_current(y0, y1, float(v_target), float(guess), model.scalars, *model.ocp,
                                   CV_TOLERANCE_V)
    else:
        i = K.implicit_cv_current(x, model.ad, model.bd, model.cout, model.dout, model.yoff,
                                  float(v_target), float(guess), model.scalars, *model.ocp,
                                  CV_TOLERANCE_V)
    if math.isnan(i):
        raise NoRoot(f"no current in the guard band reaches {v_target} V", state.time)
    return float(i)


def solid_lithium(state: CellState, params: CellParameters, aging: AgingParameterSet | None = None) -> float:
    """Moles of lithium held in both solid electrodes."""
    p = params.with_aging(aging)
    return p.plate_area * (
        p.eps_s_n * p.l_n * state.theta_bulk_n * p.c_max_n
        + p.eps_s_p * p.l_p * state.theta_bulk_p * p.c_max_p
    )


# ---------------------------------------------------------------- protocols

MODE_NAMES = {K.MODE_CC: "CC", K.MODE_CV: "CV", K.MODE_REST: "REST"}


@dataclass
class SimTrace:
    t: np.ndarray
    current: np.ndarray
    voltage: np.ndarray
    throughput: np.ndarray
    soc: np.ndarray
    mode: np.ndarray  # int8 codes, see MODE_NAMES
    final_capacity: float = float("nan")
    final_state: CellState | None = None
    status: int = K.ST_OK
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.t.size

    @property
    def mode_names(self) -> list[str]:
        return [MODE_NAMES[int(m)] for m in self.mode]

    @property
    def is_cv(self) -> np.ndarray:
        return self.mode == K.MODE_CV

    @property
    def hit_time_limit(self) -> bool:
        return self.status == K.ST_TIME_LIMIT

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("t_s,current_A,voltage_V,throughput_Ah,soc,mode\n")
            for row in zip(self.t, self.current, self.voltage, self.throughput, self.soc, self.mode):
                fh.write(f"{row[0]:.6g},{row[1]:.9g},{row[2]:.9g},{row[3]:.9g},{row[4]:.9g},{MODE_NAMES[int(row[5])]}\n")


def run(model: DiscreteModel, protocol: Protocol, x0: np.ndarray, max_steps: int | None = None):
    rates, kinds, values = protocol.compiled()
    if max_steps is None:
        max_steps = int(math.ceil(protocol.max_time / model.dt)) + 2
    return K.run_protocol(
        np.ascontiguousarray(x0, dtype=np.float64), *model.kernel_args(),
        rates, kinds, values, protocol.v_max, protocol.i_cutoff, protocol.i_nominal,
        protocol.max_time, protocol.soc_basis == "nominal", model.dt, max_steps, CV_TOLERANCE_V,
    )


_STATUS_ERRORS = {
    K.ST_SATURATION: (SurfaceSaturation, "surface stoichiometry outside (0, 1)"),
    K.ST_NONFINITE: (NonFinite, "state became non-finite"),
    K.ST_NOROOT: (NoRoot, "CV current has no root"),
    K.ST_MAX_STEPS: (SimulationError, "step budget exhausted"),
}


def run_trace(model: DiscreteModel, protocol: Protocol, state: CellState,
              tolerate: tuple[int, ...] = ()) -> SimTrace:
    t, i, v, q, s, m, n, xf, status = run(model, protocol, state.packed())
    if status in _STATUS_ERRORS and status not in tolerate:
        cls, msg = _STATUS_ERRORS[status]
        raise cls(msg, float(t[-1]))
    final = CellState.unpack(xf, model, state.time + float(t[-1]))
    return SimTrace(t.copy(), i.copy(), v.copy(), q.copy(), s.copy(), m.copy(),
                    final_state=final, status=int(status))


def simulate_protocol(params: CellParameters, aging: AgingParameterSet | None, protocol: Protocol,
                      soc0: float = 0.0, dt: float = 1.0, solid: str = "pade", fdm_nodes: int = 50,
                      label: bool = True) -> SimTrace:
    """Run ``protocol`` from a rested cell at ``soc0``.

    With ``label`` the trace carries the dischargeable capacity of this
    parameter set, measured by :func:`reference_capacity`.
    """
    model = build_model(params, aging, float(dt), solid, fdm_nodes)
    state = init_state(params, soc0, solid=solid, fdm_nodes=fdm_nodes)
    trace = run_trace(model, protocol, state)
    if label:
        trace.final_capacity = reference_capacity(params, aging, dt, solid, fdm_nodes)
    trace.meta.update(protocol=protocol.name, soc0=soc0, dt=dt, solid=solid)
    return trace


@functools.lru_cache(maxsize=4096)
def reference_capacity(params: CellParameters, aging: AgingParameterSet | None = None,
                       dt: float = 1.0, solid: str = "pade", fdm_nodes: int = 50) -> float:
    """Dischargeable capacity (Ah): 1C CCCV charge from 0% SOC, then 1C
    discharge to 2.5 V.  Running out of surface lithium ends the discharge
    as the floor would."""
    model = build_model(params, aging, float(dt), solid, fdm_nodes)
    state = init_state(params, 0.0, solid=solid, fdm_nodes=fdm_nodes)
    charged = run_trace(model, make_cccv(1.0), state, tolerate=(K.ST_SATURATION,))
    discharge = run_trace(model, make_discharge(1.0), charged.final_state, tolerate=(K.ST_SATURATION,))
    cur = discharge.current
    ok = np.isfinite(discharge.voltage)
    return float(-np.sum(cur[ok] * model.dt) / 3600.0)
