"""Charge/discharge programs and the CC/CV setpoint state machine.

A :class:`Protocol` is declarative: an ordered list of constant-current
stages, each with an end condition, plus the voltage ceiling and the CV
cutoff current.  Within any charging stage, reaching ``v_max`` switches to a
CV hold at ``v_max``.  The hold ends when the stage's own end condition
fires (SOC break or elapsed time), or, once the current has decayed to
``i_cutoff``, the program is done.  Voltage-ended charging stages hand over to
the next, lower rate when ``v_max`` is reached.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from . import _kernels as K
from .params import NOMINAL_CAPACITY_AH, ParameterError, parse_key_values

C_RATE_GUARD = 4.0
DEFAULT_MAX_TIME = 4 * 3600.0
V_FLOOR = 2.5

EndKind = Literal["soc", "voltage", "time"]
_END_CODES = {"soc": K.END_SOC, "voltage": K.END_VOLTAGE, "time": K.END_TIME}


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class Stage:
    c_rate: float
    end: EndKind
    value: float

    def __post_init__(self):
        if self.end not in _END_CODES:
            raise ProtocolError(f"unknown end condition {self.end!r}")
        if self.c_rate == 0 and self.end != "time":
            raise ProtocolError("zero-current stages must end on time")
        if abs(self.c_rate) > C_RATE_GUARD:
            raise ProtocolError(f"|c_rate| {self.c_rate} exceeds the {C_RATE_GUARD}C guard")


@dataclass(frozen=True)
class Protocol:
    stages: tuple[Stage, ...]
    v_max: float = 4.2
    i_cutoff: float = 0.16
    terminal: Literal["cv_cutoff", "voltage_floor", "time_limit"] = "cv_cutoff"
    max_time: float = DEFAULT_MAX_TIME
    soc_basis: Literal["aged", "nominal"] = "aged"
    nominal_ah: float = NOMINAL_CAPACITY_AH
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if not self.stages:
            raise ProtocolError("a protocol needs at least one stage")
        if not 3.0 < self.v_max <= 4.3:
            raise ProtocolError(f"v_max {self.v_max} outside (3.0, 4.3]")
        if not self.i_cutoff > 0:
            raise ProtocolError("i_cutoff must be positive")
        if self.soc_basis not in ("aged", "nominal"):
            raise ProtocolError(f"unknown soc_basis {self.soc_basis!r}")
        socs = [s.value for s in self.stages if s.end == "soc" and s.c_rate > 0]
        if any(b <= a for a, b in zip(socs, socs[1:])):
            raise ProtocolError("SOC breaks must increase across charging stages")

    @property
    def i_nominal(self) -> float:
        """Current of 1C in amps (against nominal, not aged, capacity)."""
        return self.nominal_ah

    def compiled(self):
        rates = np.array([s.c_rate for s in self.stages], dtype=np.float64)
        kinds = np.array([_END_CODES[s.end] for s in self.stages], dtype=np.int64)
        values = np.array([s.value for s in self.stages], dtype=np.float64)
        return rates, kinds, values


@dataclass
class ControlMode:
    """Live setpoint: ``kind`` is ``"CC"``, ``"CV"`` or ``"Done"``."""

    kind: Literal["CC", "CV", "Done"]
    stage: int = 0
    current: float | None = None
    v_target: float | None = None


@dataclass
class Observation:
    soc: float
    voltage: float
    current: float
    mode: Literal["CC", "CV", "Done"] = "CC"
    stage_index: int = 0
    stage_time: float = 0.0
    time: float = 0.0


_MODE_CODES = {"CC": K.MODE_CC, "CV": K.MODE_CV, "Done": K.MODE_DONE}
_MODE_NAMES = {v: k for k, v in _MODE_CODES.items()}


def make_cccv(c_rate: float, v_max: float = 4.2, i_cutoff: float = 0.16, nominal_ah: float = NOMINAL_CAPACITY_AH) -> Protocol:
    if not c_rate > 0:
        raise ProtocolError("c_rate must be positive")
    if i_cutoff >= c_rate * nominal_ah:
        raise ProtocolError("cutoff current must be below the CC current")
    return Protocol(
        stages=(Stage(c_rate, "voltage", v_max),),
        v_max=v_max,
        i_cutoff=i_cutoff,
        nominal_ah=nominal_ah,
        name=f"cccv-{c_rate:g}c",
    )


def make_mscc(
    stage_rates=(2.0, 1.5, 1.0, 0.5),
    soc_breaks=(0.60, 0.80),
    v_max: float = 4.2,
    i_cutoff: float = 0.16,
    soc_basis: str = "aged",
    nominal_ah: float = NOMINAL_CAPACITY_AH,
) -> Protocol:
    """Multi-stage CC charge.  Stage ``i`` ends at ``soc_breaks[i]`` while
    breaks remain; later stages end when ``v_max`` is reached, and the last one
    is followed by CV down to ``i_cutoff``.
    """
    rates = list(stage_rates)
    breaks = list(soc_breaks)
    if not rates:
        raise ProtocolError("need at least one stage rate")
    if any(r <= 0 for r in rates):
        raise ProtocolError("charging rates must be positive")
    if any(b >= a for a, b in zip(rates, rates[1:])):
        raise ProtocolError("stage rates must be strictly decreasing")
    if len(breaks) >= len(rates):
        raise ProtocolError("need fewer SOC breaks than stages")
    if any(not 0 < b < 1 for b in breaks) or any(b <= a for a, b in zip(breaks, breaks[1:])):
        raise ProtocolError("SOC breaks must be increasing within (0, 1)")
    if i_cutoff >= rates[-1] * nominal_ah:
        raise ProtocolError("cutoff current must be below the last CC current")
    stages = [Stage(r, "soc", b) for r, b in zip(rates, breaks)]
    stages += [Stage(r, "voltage", v_max) for r in rates[len(breaks):]]
    return Protocol(
        stages=tuple(stages), v_max=v_max, i_cutoff=i_cutoff,
        soc_basis=soc_basis, nominal_ah=nominal_ah, name="mscc",
    )


def make_discharge(c_rate: float = 1.0, v_floor: float = V_FLOOR, nominal_ah: float = NOMINAL_CAPACITY_AH) -> Protocol:
    if not c_rate > 0:
        raise ProtocolError("give the discharge rate as a positive number")
    return Protocol(
        stages=(Stage(-c_rate, "voltage", v_floor),),
        terminal="voltage_floor",
        nominal_ah=nominal_ah,
        name=f"discharge-{c_rate:g}c",
    )


def make_dynamic_replay(c_rates, step_s: float = 1.0, v_max: float = 4.2, nominal_ah: float = NOMINAL_CAPACITY_AH) -> Protocol:
    """Piecewise-constant current program, one stage per entry of ``c_rates``."""
    stages = tuple(Stage(float(r), "time", step_s) for r in c_rates)
    return Protocol(
        stages=stages, v_max=v_max, i_cutoff=0.16, terminal="time_limit",
        max_time=step_s * len(stages) + 1.0, nominal_ah=nominal_ah, name="dynamic",
    )


def synthetic_drive_profile(duration_s: int = 1370, seed: int = 0, peak_c: float = 1.5) -> np.ndarray:
    """Seeded urban-drive-like C-rate sequence: bursts of discharge with
    regenerative charge pulses and idle periods, 1 s resolution."""
    rng = np.random.default_rng(seed)
    out = np.zeros(duration_s)
    t = 0
    while t < duration_s:
        idle = int(rng.integers(5, 40))
        t += idle
        burst = int(rng.integers(20, 120))
        shape = np.sin(np.linspace(0, np.pi, burst)) * rng.uniform(0.3, 1.0) * peak_c
        seg = -shape
        regen = rng.random(burst) < 0.15
        seg[regen] = 0.3 * shape[regen]
        end = min(duration_s, t + burst)
        if end > t:
            out[t:end] = seg[: end - t]
        t = end
    return np.round(out, 4)


PRESETS = {
    "cccv-1c": lambda: make_cccv(1.0),
    "cccv-1.5c": lambda: make_cccv(1.5),
    "cccv-2c": lambda: make_cccv(2.0),
    "mscc": lambda: make_mscc(),
}


def preset(name: str) -> Protocol:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ProtocolError(f"unknown protocol preset {name!r}; choose from {sorted(PRESETS)}") from None


def controller_next(protocol: Protocol, observed: Observation) -> ControlMode:
    rates, kinds, values = protocol.compiled()
    mode, stage, _ = K.controller_step(
        rates, kinds, values, protocol.v_max, protocol.i_cutoff, protocol.i_nominal,
        protocol.max_time, observed.soc, observed.voltage, observed.current,
        _MODE_CODES[observed.mode], observed.stage_index, observed.stage_time, observed.time,
    )
    kind = _MODE_NAMES[int(mode)]
    if kind == "CC":
        return ControlMode("CC", int(stage), current=float(rates[stage] * protocol.i_nominal))
    if kind == "CV":
        return ControlMode("CV", int(stage), v_target=protocol.v_max)
    return ControlMode("Done", int(stage))


# ---------------------------------------------------------------- file format
#
#   stages = 2.0@soc:0.6, 1.5@soc:0.8, 1.0@voltage:4.2, 0.5@voltage:4.2
#   v_max = 4.2
#   i_cutoff = 0.16


def read_protocol_file(path) -> Protocol:
    kv = parse_key_values(Path(path).read_text())
    if "stages" not in kv:
        raise ProtocolError(f"{path}: missing 'stages'")
    stages = []
    for item in kv.pop("stages").split(","):
        try:
            rate, cond = item.strip().split("@")
            end, value = cond.split(":")
            stages.append(Stage(float(rate), end.strip(), float(value)))
        except ValueError as exc:
            raise ProtocolError(f"{path}: bad stage {item!r}") from exc
    kwargs = {}
    for key in ("v_max", "i_cutoff", "max_time", "nominal_ah"):
        if key in kv:
            kwargs[key] = float(kv.pop(key))
    for key in ("terminal", "soc_basis", "name"):
        if key in kv:
            kwargs[key] = kv.pop(key)
    if kv:
        raise ProtocolError(f"{path}: unknown keys {sorted(kv)}")
    try:
        return Protocol(stages=tuple(stages), **kwargs)
    except ParameterError as exc:
        raise ProtocolError(str(exc)) from exc


def write_protocol_file(protocol: Protocol, path) -> None:
    stages = ", ".join(f"{float(s.c_rate)!r}@{s.end}:{float(s.value)!r}" for s in protocol.stages)
    lines = [
        f"stages = {stages}",
        f"v_max = {protocol.v_max!r}",
        f"i_cutoff = {protocol.i_cutoff!r}",
        f"terminal = {protocol.terminal}",
        f"max_time = {protocol.max_time!r}",
        f"soc_basis = {protocol.soc_basis}",
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def resolve_protocol(spec: str) -> Protocol:
    """Preset name or path to a protocol file."""
    if spec in PRESETS:
        return preset(spec)
    p = Path(spec)
    if p.exists():
        return read_protocol_file(p)
    raise ProtocolError(f"{spec!r} is neither a preset nor a protocol file")
