"""Power-system data model: buses, branches, machines, loads and actuators.

All quantities are per unit on ``base_mva``. Cases are immutable; every
modification (events, load scaling) returns a new case.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Optional

import numpy as np


class CaseError(ValueError):
    """Invalid case data or an event that cannot be applied."""


class LimitSaturation(UserWarning):
    """A tap step was clipped at the tap-changer limit."""


@dataclass(frozen=True)
class Bus:
    id: int
    V: float = 1.0
    theta: float = 0.0
    shunt_b: float = 0.0
    is_lv_side: bool = False


@dataclass(frozen=True)
class Line:
    id: int
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float = 0.0
    tap: float = 1.0  # fixed off-nominal ratio on the from side
    in_service: bool = True

    def __post_init__(self):
        if self.x == 0.0:
            raise CaseError(f"line {self.id}: reactance must be nonzero")


@dataclass(frozen=True)
class Generator:
    id: int
    bus: int
    H: float
    D: float
    xd_p: float
    P_set: float = 0.0
    V_set: float = 1.0
    is_ref: bool = False
    E_p: Optional[float] = None  # filled by initialization
    Pm: Optional[float] = None

    def __post_init__(self):
        if self.H <= 0:
            raise CaseError(f"generator {self.id}: inertia must be positive")


@dataclass(frozen=True)
class ErLoad:
    """Exponential-recovery load.

    ``V0 == 0`` means "take the initial power-flow voltage"; the resolved
    reference is stored in ``V_ref`` by the initialization.
    """
    bus: int
    P0: float
    Q0: float
    T_P: float = 30.0
    T_Q: float = 30.0
    alpha_s: float = 1.0
    alpha_t: float = 2.0
    beta_s: float = 1.0
    beta_t: float = 2.0
    V0: float = 0.0
    V_ref: Optional[float] = None

    def __post_init__(self):
        if self.T_P <= 0 or self.T_Q <= 0:
            raise CaseError(f"load at bus {self.bus}: time constants must be positive")
        if self.P0 < 0 or self.Q0 < 0:
            raise CaseError(f"load at bus {self.bus}: base powers must be nonnegative")


@dataclass(frozen=True)
class SvcDevice:
    id: int
    bus: int
    b0: float = 0.0
    u_min: float = 0.0
    u_max: float = 0.2
    b_max: float = 1.0  # cumulative susceptance limit
    K_r: float = 0.0  # regulator gain/time constant of the dynamic model;
    T_r: float = 1e6  # kept for reference, unused by the injection model


@dataclass(frozen=True)
class LtcTransformer:
    id: int
    hv_bus: int
    lv_bus: int
    x: float = 0.08
    m: float = 1.0
    m_min: float = 0.9
    m_max: float = 1.1
    tap_step: float = 0.01
    T_mech: float = 5.0

    def __post_init__(self):
        if self.x == 0.0:
            raise CaseError(f"ltc {self.id}: reactance must be nonzero")


@dataclass(frozen=True)
class LsActuator:
    id: int
    bus: int
    u_min: float = 0.0
    u_max: float = 0.1
    shed: float = 0.0  # cumulative amount already shed at case level


@dataclass(frozen=True)
class AvcSetting:
    ltc: int
    V_r: float = 1.0
    V_db: float = 0.02


@dataclass(frozen=True)
class ControlVector:
    """Absolute control setting.

    ``svc``: susceptance per SVC; ``ls``: shed base power per LS actuator
    (on top of anything already shed in the case); ``ltc``: tap position
    offset in steps per LTC relative to the case ratio.
    """
    svc: np.ndarray
    ls: np.ndarray
    ltc: np.ndarray

    def __post_init__(self):
        for name in ("svc", "ls", "ltc"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).copy())

    def __eq__(self, other):
        if not isinstance(other, ControlVector):
            return NotImplemented
        return (np.array_equal(self.svc, other.svc) and np.array_equal(self.ls, other.ls)
                and np.array_equal(self.ltc, other.ltc))

    def __add__(self, other: "ControlVector") -> "ControlVector":
        return ControlVector(self.svc + other.svc, self.ls + other.ls, self.ltc + other.ltc)

    def copy(self) -> "ControlVector":
        return ControlVector(self.svc, self.ls, self.ltc)


@dataclass(frozen=True)
class PowerSystemCase:
    name: str
    buses: tuple
    lines: tuple
    generators: tuple
    loads: tuple
    svcs: tuple = ()
    ltcs: tuple = ()
    ls_actuators: tuple = ()
    avc: tuple = ()
    base_mva: float = 100.0
    freq: float = 60.0
    faults: tuple = ()  # (bus id, complex shunt admittance)

    def __post_init__(self):
        for name in ("buses", "lines", "generators", "loads", "svcs", "ltcs",
                     "ls_actuators", "avc", "faults"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    # -- structure -----------------------------------------------------
    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @cached_property
    def bus_index(self) -> dict:
        return {b.id: i for i, b in enumerate(self.buses)}

    @cached_property
    def ref_index(self) -> int:
        return next(i for i, g in enumerate(self.generators) if g.is_ref)

    @property
    def lv_buses(self) -> list:
        return [b.id for b in self.buses if b.is_lv_side]

    @property
    def initialized(self) -> bool:
        return all(g.E_p is not None and g.Pm is not None for g in self.generators) and \
            all(ld.V_ref is not None for ld in self.loads)

    def load_at(self, bus: int) -> int:
        for i, ld in enumerate(self.loads):
            if ld.bus == bus:
                return i
        raise CaseError(f"no load at bus {bus}")

    def channel_labels(self) -> list:
        return ([f"svc:{d.bus}" for d in self.svcs] + [f"ls:{d.bus}" for d in self.ls_actuators]
                + [f"ltc:{d.id}" for d in self.ltcs])

    def zero_controls(self) -> ControlVector:
        return ControlVector(np.array([d.b0 for d in self.svcs]), np.zeros(len(self.ls_actuators)),
                             np.zeros(len(self.ltcs)))

    def avc_for(self, ltc_id: int) -> AvcSetting:
        for a in self.avc:
            if a.ltc == ltc_id:
                return a
        return AvcSetting(ltc_id)

    def validate(self):
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise CaseError("duplicate bus ids")
        known = set(ids)

        def check(bus, what):
            if bus not in known:
                raise CaseError(f"{what} references unknown bus {bus}")

        for ln in self.lines:
            check(ln.from_bus, f"line {ln.id}")
            check(ln.to_bus, f"line {ln.id}")
        if not self.generators:
            raise CaseError("case needs at least one generator")
        for g in self.generators:
            check(g.bus, f"generator {g.id}")
        if sum(g.is_ref for g in self.generators) != 1:
            raise CaseError("exactly one generator must be the angle reference")
        if len({g.bus for g in self.generators}) != len(self.generators):
            raise CaseError("at most one generator per bus")
        if len({ld.bus for ld in self.loads}) != len(self.loads):
            raise CaseError("at most one load per bus")
        for ld in self.loads:
            check(ld.bus, "load")
        for d in self.svcs:
            check(d.bus, f"svc {d.id}")
        for d in self.ltcs:
            check(d.hv_bus, f"ltc {d.id}")
            check(d.lv_bus, f"ltc {d.id}")
            if not d.m_min <= d.m <= d.m_max:
                raise CaseError(f"ltc {d.id}: ratio {d.m} outside [{d.m_min}, {d.m_max}]")
        load_buses = {ld.bus for ld in self.loads}
        for d in self.ls_actuators:
            check(d.bus, f"ls {d.id}")
            if d.bus not in load_buses:
                raise CaseError(f"ls {d.id}: bus {d.bus} hosts no load")
        ltc_ids = {d.id for d in self.ltcs}
        for a in self.avc:
            if a.ltc not in ltc_ids:
                raise CaseError(f"avc references unknown ltc {a.ltc}")
            if a.V_db <= 0:
                raise CaseError(f"avc {a.ltc}: dead-band must be positive")
        for bus, _ in self.faults:
            check(bus, "fault")


# -- events -------------------------------------------------------------
FAULT_ADMITTANCE = 100.0 - 100.0j


@dataclass(frozen=True)
class FaultOn:
    bus: int
    admittance: complex = FAULT_ADMITTANCE


@dataclass(frozen=True)
class FaultOff:
    bus: int


@dataclass(frozen=True)
class LineTrip:
    line: int


@dataclass(frozen=True)
class TapStep:
    ltc: int
    direction: int


@dataclass(frozen=True)
class LoadShed:
    bus: int
    amount: float


def apply_event(case: PowerSystemCase, event) -> PowerSystemCase:
    """Return a copy of ``case`` with ``event`` applied.

    Tap steps beyond the ratio limits saturate and emit ``LimitSaturation``.
    """
    if isinstance(event, FaultOn):
        case.bus_index[event.bus]  # existence
        faults = tuple(f for f in case.faults if f[0] != event.bus) + ((event.bus, complex(event.admittance)),)
        return replace(case, faults=faults)
    if isinstance(event, FaultOff):
        if not any(f[0] == event.bus for f in case.faults):
            raise CaseError(f"no fault at bus {event.bus}")
        return replace(case, faults=tuple(f for f in case.faults if f[0] != event.bus))
    if isinstance(event, LineTrip):
        lines = list(case.lines)
        for i, ln in enumerate(lines):
            if ln.id == event.line:
                lines[i] = replace(ln, in_service=False)
                return replace(case, lines=tuple(lines))
        raise CaseError(f"unknown line {event.line}")
    if isinstance(event, TapStep):
        ltcs = list(case.ltcs)
        for i, t in enumerate(ltcs):
            if t.id == event.ltc:
                m = t.m + np.sign(event.direction) * t.tap_step
                if m > t.m_max + 1e-12 or m < t.m_min - 1e-12:
                    warnings.warn(f"ltc {t.id} saturated at limit", LimitSaturation)
                    m = min(max(m, t.m_min), t.m_max)
                ltcs[i] = replace(t, m=float(m))
                return replace(case, ltcs=tuple(ltcs))
        raise CaseError(f"unknown ltc {event.ltc}")
    if isinstance(event, LoadShed):
        li = case.load_at(event.bus)
        ld = case.loads[li]
        if event.amount < 0 or event.amount > ld.P0 + 1e-12:
            raise CaseError(f"cannot shed {event.amount} p.u. at bus {event.bus} (remaining {ld.P0})")
        ratio = ld.Q0 / ld.P0 if ld.P0 > 0 else 0.0
        loads = list(case.loads)
        loads[li] = replace(ld, P0=ld.P0 - event.amount, Q0=max(ld.Q0 - ratio * event.amount, 0.0))
        acts = tuple(replace(a, shed=a.shed + event.amount) if a.bus == event.bus else a
                     for a in case.ls_actuators)
        return replace(case, loads=tuple(loads), ls_actuators=acts)
    raise CaseError(f"unsupported event {event!r}")


def scale_loads(case: PowerSystemCase, factor: float, guard=(0.5, 1.5)) -> PowerSystemCase:
    """Multiply every load's base powers by ``factor``.

    Machine EMFs and load reference voltages are reset, so the caller must
    re-initialize the equilibrium.
    """
    if not guard[0] <= factor <= guard[1]:
        raise CaseError(f"load factor {factor} outside {guard}")
    if factor == 1.0:
        return case
    loads = tuple(replace(ld, P0=ld.P0 * factor, Q0=ld.Q0 * factor) for ld in case.loads)
    return replace(case, loads=loads)
