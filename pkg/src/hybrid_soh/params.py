"""Cell parameter sets, aging parameters and open-circuit potential tables.

Parameter files are plain ``key = value`` text, one entry per line, ``#``
starting a comment.  OCP tables are two-column CSV (``theta,potential_V``).
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import logging
import math
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

FARADAY = 96485.33212  # C/mol
GAS_CONSTANT = 8.314462618  # J/(mol K)
NOMINAL_CAPACITY_AH = 3.35


class ParameterError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class OcpTable:
    """Equilibrium potential of one electrode against stoichiometry.

    Linear interpolation between points; values outside the tabulated range
    clamp to the end points.
    """

    theta: np.ndarray
    potential: np.ndarray

    def __post_init__(self):
        theta = np.ascontiguousarray(self.theta, dtype=np.float64)
        potential = np.ascontiguousarray(self.potential, dtype=np.float64)
        if theta.ndim != 1 or theta.shape != potential.shape:
            raise ParameterError("OCP table columns must be 1-d and of equal length")
        if theta.size < 20:
            raise ParameterError(f"OCP table needs at least 20 points, got {theta.size}")
        if np.any(np.diff(theta) <= 0):
            raise ParameterError("OCP theta column must be strictly increasing")
        if theta[0] < 0 or theta[-1] > 1:
            raise ParameterError("OCP theta must lie in [0, 1]")
        if not np.all(np.isfinite(potential)) or np.any(potential <= 0):
            raise ParameterError("OCP potentials must be finite and positive")
        theta.setflags(write=False)
        potential.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "potential", potential)

    def __call__(self, theta):
        return np.interp(theta, self.theta, self.potential)

    def digest(self) -> str:
        h = hashlib.sha256(self.theta.tobytes())
        h.update(self.potential.tobytes())
        return h.hexdigest()[:16]

    def __eq__(self, other):
        if not isinstance(other, OcpTable):
            return NotImplemented
        return np.array_equal(self.theta, other.theta) and np.array_equal(
            self.potential, other.potential
        )

    def __hash__(self):
        return hash(self.digest())

    @classmethod
    def from_csv(cls, path) -> "OcpTable":
        path = Path(path)
        with open(path) as fh:
            header = fh.readline().strip().replace(" ", "")
            if header != "theta,potential_V":
                raise ParameterError(f"{path}: expected header 'theta,potential_V', got {header!r}")
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
        return cls(data[:, 0], data[:, 1])

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("theta,potential_V\n")
            for t, u in zip(self.theta, self.potential):
                fh.write(f"{float(t)!r},{float(u)!r}\n")


def reference_ocp(electrode: str) -> OcpTable:
    """Shipped reference curves: graphite for ``"n"``, NCA-like for ``"p"``."""
    name = {"n": "ocp_graphite.csv", "p": "ocp_nca.csv"}[electrode]
    with resources.as_file(resources.files("hybrid_soh") / "data" / name) as p:
        return OcpTable.from_csv(p)


@dataclass(frozen=True)
class CellParameters:
    # geometry (m, m^2)
    l_n: float = 7.5e-5
    l_sep: float = 1.2e-5
    l_p: float = 8.5e-5
    plate_area: float = 0.0802
    r_n: float = 5.22e-6
    r_p: float = 5.86e-6
    # volume fractions
    eps_e_n: float = 0.31
    eps_e_sep: float = 0.45
    eps_e_p: float = 0.26
    eps_s_n: float = 0.4882
    eps_s_p: float = 0.6053
    # solid phase (mol/m^3, m^2/s, m^2.5 mol^-0.5 s^-1)
    c_max_n: float = 58114.0
    c_max_p: float = 44871.0
    theta_n_0: float = 0.0214
    theta_n_100: float = 0.7174
    theta_p_0: float = 0.9377
    theta_p_100: float = 0.2717
    d_s_n: float = 2.787e-14
    d_s_p: float = 2.2006e-14
    k_n: float = 1.5428e-3
    k_p: float = 2.3284e-6
    # electrolyte and lumped
    kappa_e: float = 0.963
    r0: float = 1.501e-3
    c_e_init: float = 1000.0
    d_e: float = 1e-9
    t_plus: float = 0.363
    temperature: float = 298.15
    ocp_n: OcpTable = field(default_factory=lambda: reference_ocp("n"), compare=True)
    ocp_p: OcpTable = field(default_factory=lambda: reference_ocp("p"), compare=True)

    def __post_init__(self):
        self.validate()

    def validate(self, capacity_tolerance: float = 0.05) -> None:
        for f in fields(self):
            if f.name.startswith("ocp_"):
                continue
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v > 0):
                raise ParameterError(f"{f.name} must be finite and positive, got {v}")
        for name in ("eps_e_n", "eps_e_sep", "eps_e_p", "eps_s_n", "eps_s_p", "t_plus"):
            if not 0 < getattr(self, name) < 1:
                raise ParameterError(f"{name} must lie in (0, 1)")
        for name in ("theta_n_0", "theta_n_100", "theta_p_0", "theta_p_100"):
            if not 0 <= getattr(self, name) <= 1:
                raise ParameterError(f"{name} must lie in [0, 1]")
        if not self.theta_n_100 > self.theta_n_0:
            raise ParameterError("anode window must satisfy theta_n_100 > theta_n_0")
        if not self.theta_p_100 < self.theta_p_0:
            raise ParameterError("cathode window must satisfy theta_p_100 < theta_p_0")
        q_n = electrode_capacity(self, "anode")
        q_p = electrode_capacity(self, "cathode")
        if abs(q_p - q_n) > capacity_tolerance * max(q_n, q_p):
            log.warning(
                "electrode capacities disagree: cathode %.4f Ah, anode %.4f Ah", q_p, q_n
            )

    def with_aging(self, aging: "AgingParameterSet | None") -> "CellParameters":
        """Copy with the aging fields overridden.  Skips the capacity
        consistency warning, which concerns the pristine set only."""
        if aging is None:
            return self
        if not (aging.eps_s_p < 1 and aging.eps_s_n < 1):
            raise ParameterError("aged active-material fractions must stay below 1")
        new = copy.copy(self)
        for name in AGING_FIELDS:
            object.__setattr__(new, name, float(getattr(aging, name)))
        return new

    def scalar_items(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self) if not f.name.startswith("ocp_")]

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, v in self.scalar_items():
            h.update(f"{name}={float(v).hex()};".encode())
        h.update(self.ocp_n.digest().encode())
        h.update(self.ocp_p.digest().encode())
        return h.hexdigest()[:16]


def electrode_capacity(params: CellParameters, side: str) -> float:
    """Usable capacity of one electrode window in Ah."""
    if side in ("cathode", "p"):
        return (
            params.plate_area * FARADAY * params.l_p * params.eps_s_p
            * abs(params.theta_p_0 - params.theta_p_100) * params.c_max_p / 3600.0
        )
    if side in ("anode", "n"):
        return (
            params.plate_area * FARADAY * params.l_n * params.eps_s_n
            * abs(params.theta_n_100 - params.theta_n_0) * params.c_max_n / 3600.0
        )
    raise ValueError(f"side must be 'anode' or 'cathode', got {side!r}")


AGING_FIELDS = ("eps_s_p", "eps_s_n", "d_s_p", "d_s_n", "k_p", "k_n", "r0")


@dataclass(frozen=True)
class AgingParameterSet:
    """The seven degradation-tracking parameters."""

    eps_s_p: float
    eps_s_n: float
    d_s_p: float
    d_s_n: float
    k_p: float
    k_n: float
    r0: float

    def __post_init__(self):
        for name in AGING_FIELDS:
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ParameterError(f"aging parameter {name} must be positive, got {v}")

    @classmethod
    def from_params(cls, params: CellParameters) -> "AgingParameterSet":
        return cls(*(getattr(params, n) for n in AGING_FIELDS))

    @classmethod
    def from_array(cls, values) -> "AgingParameterSet":
        values = np.asarray(values, dtype=float)
        return cls(*(float(v) for v in values))

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in AGING_FIELDS])

    def scaled(self, multipliers) -> "AgingParameterSet":
        return AgingParameterSet.from_array(self.as_array() * np.asarray(multipliers, dtype=float))


# ---------------------------------------------------------------- file format

_UNITS = {
    "l_n": "m", "l_sep": "m", "l_p": "m", "plate_area": "m^2", "r_n": "m", "r_p": "m",
    "c_max_n": "mol/m^3", "c_max_p": "mol/m^3", "d_s_n": "m^2/s", "d_s_p": "m^2/s",
    "k_n": "m^2.5/mol^0.5/s", "k_p": "m^2.5/mol^0.5/s", "kappa_e": "S/m", "r0": "ohm",
    "c_e_init": "mol/m^3", "d_e": "m^2/s", "temperature": "K",
}


def write_parameter_file(params: CellParameters, path, ocp_n_path=None, ocp_p_path=None) -> None:
    path = Path(path)
    lines = ["# cell parameter set; key = value  # unit"]
    for name, v in params.scalar_items():
        unit = _UNITS.get(name, "-")
        lines.append(f"{name} = {float(v)!r}  # {unit}")
    if ocp_n_path is None:
        ocp_n_path = path.with_name(path.stem + "_ocp_n.csv")
        params.ocp_n.to_csv(ocp_n_path)
    if ocp_p_path is None:
        ocp_p_path = path.with_name(path.stem + "_ocp_p.csv")
        params.ocp_p.to_csv(ocp_p_path)
    lines.append(f"ocp_n = {Path(ocp_n_path).name if Path(ocp_n_path).parent == path.parent else ocp_n_path}")
    lines.append(f"ocp_p = {Path(ocp_p_path).name if Path(ocp_p_path).parent == path.parent else ocp_p_path}")
    path.write_text("\n".join(lines) + "\n")


def parse_key_values(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def read_parameter_file(path) -> CellParameters:
    """Read a key-value parameter file.  Missing keys fall back to the built-in defaults."""
    path = Path(path)
    kv = parse_key_values(path.read_text())
    known = {f.name for f in fields(CellParameters)}
    unknown = set(kv) - known
    if unknown:
        raise ParameterError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in kv.items():
        if key.startswith("ocp_"):
            p = Path(value)
            if not p.is_absolute():
                p = path.parent / p
            if not p.exists():
                raise ParameterError(f"{path}: OCP file {p} does not exist")
            kwargs[key] = OcpTable.from_csv(p)
        else:
            kwargs[key] = float(value)
    return CellParameters(**kwargs)


def aging_to_dict(aging: AgingParameterSet) -> dict:
    return dataclasses.asdict(aging)
