"""Contingency scenarios and their control-instant grids."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .case import CaseError, FaultOff, FaultOn, LineTrip, PowerSystemCase


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    case: str = "9bus"
    fault_bus: Optional[int] = 5
    t_fault: float = 1.0
    t_clear: float = 1.1
    trip_line: Optional[tuple] = (4, 5)  # end buses of the tripped line
    t_first: float = 4.5
    T_c: float = 3.0
    N_c: int = 5
    t_end: float = 30.0
    load_factor: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.fault_bus is not None and self.t_clear <= self.t_fault:
            raise ValueError("fault clearing must follow inception")
        if self.T_c <= 0 or self.N_c < 1:
            raise ValueError("need T_c > 0 and N_c >= 1")

    @property
    def instants(self) -> np.ndarray:
        return self.t_first + self.T_c * np.arange(self.N_c)

    def instant(self, k: int) -> float:
        return self.t_first + k * self.T_c

    def with_load(self, factor: float) -> "ScenarioConfig":
        return replace(self, load_factor=float(factor))

    def events(self, case: PowerSystemCase) -> list:
        if self.fault_bus is None:
            return []
        ev = [(self.t_fault, FaultOn(self.fault_bus)), (self.t_clear, FaultOff(self.fault_bus))]
        if self.trip_line is not None:
            ev.append((self.t_clear, LineTrip(line_between(case, *self.trip_line))))
        return ev

    def check_grid(self, T_s: float):
        # fault times only need to sit on the internal step grid
        for t in (self.t_first, self.T_c):
            if abs(t / T_s - round(t / T_s)) > 1e-9:
                raise ValueError(f"time {t} not aligned to T_s = {T_s}")


def line_between(case: PowerSystemCase, a: int, b: int) -> int:
    for ln in case.lines:
        if {ln.from_bus, ln.to_bus} == {a, b}:
            return ln.id
    raise CaseError(f"no line between buses {a} and {b}")


SCENARIOS = {
    "fault5": ScenarioConfig("fault5", case="9bus", fault_bus=5, trip_line=(4, 5)),
    "fault15": ScenarioConfig("fault15", case="39bus", fault_bus=15, trip_line=(15, 16)),
    "none": ScenarioConfig("none", fault_bus=None, trip_line=None),
}


def get_scenario(name: str, **overrides) -> ScenarioConfig:
    try:
        sc = SCENARIOS[name]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None
    return replace(sc, **overrides) if overrides else sc
