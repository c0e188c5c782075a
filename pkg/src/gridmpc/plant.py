"""Software-in-the-loop plant: the perturbed system advanced one control interval at a time.

The plant is simulated with the full DAE model; "measurements" are its
sampled bus voltages. The same driver serves data generation, the online
loop and the full-model reference controller.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .case import ControlVector, PowerSystemCase, scale_loads
from .integrator import Trajectory, simulate
from .model import model_for
from .mpc import AvcConfig, ControlSchedule, MpcConfig, concat_trajectories, ltc_decision, run_receding_horizon
from .powerflow import initialize_equilibrium
from .scenarios import ScenarioConfig


@dataclass
class NominalDesign:
    """Offline result the online stage builds on."""
    case: PowerSystemCase  # raw case (loads at nominal)
    scenario: ScenarioConfig
    config: MpcConfig
    schedule: ControlSchedule
    avc: AvcConfig = field(default_factory=AvcConfig)

    @property
    def M(self) -> int:
        return self.config.M

    @property
    def N_c(self) -> int:
        return self.config.N_c


def design_nominal(case: PowerSystemCase, scenario: ScenarioConfig, config: Optional[MpcConfig] = None,
                   avc: Optional[AvcConfig] = None) -> NominalDesign:
    """Run the offline MPC on the nominal load and keep what the online loop needs."""
    config = config or MpcConfig()
    avc = avc or AvcConfig(T_c=config.T_c)
    res = run_receding_horizon(case, scenario.with_load(1.0), config, avc)
    return NominalDesign(case, scenario.with_load(1.0), config, res.schedule, avc)


class PlantRun:
    """Perturbed plant under a schedule that is filled in as the run proceeds."""

    def __init__(self, design: NominalDesign, load_factor: float):
        self.design = design
        self.load_factor = float(load_factor)
        eq = initialize_equilibrium(scale_loads(design.case, load_factor))
        self.case0 = eq.case
        self.model = model_for(self.case0)
        cfg, sc = design.config, design.scenario
        self.integ = cfg.integrator()
        nom = design.schedule
        # applied schedule: starts empty, taps and increments written per instant
        self.applied = ControlSchedule.empty(self.case0, nom.n_instants, nom.t_first, nom.T_c)
        self.applied.delay = nom.delay
        pre = simulate(self.case0, sc.events(self.case0), [], 0.0, sc.t_first, self.integ, eq.x, eq.y)
        self.parts = [pre]
        self.case_k = pre.case_end
        self.x, self.y = pre.final[0], pre.final[1]
        self.k = 0
        nb = self.model.nb
        self.lv_rows = self.model.bus_rows(self.case0.lv_buses) if self.case0.lv_buses else []
        self.nch = len(self.case0.svcs) + len(self.case0.ls_actuators)
        self._nb = nb

    @property
    def t(self) -> float:
        return self.design.scenario.instant(self.k)

    def measurement(self) -> np.ndarray:
        """Bus voltages over the last control interval, shape (M, N_b)."""
        M = self.design.M
        V = self.parts[-1].V
        if len(V) < M:
            raise ValueError("plant history shorter than one control interval")
        return V[-M:].copy()

    def held(self, k: Optional[int] = None) -> ControlVector:
        """Real setting in force from instant ``k`` before its own increment."""
        k = self.k if k is None else k
        return self.applied.setting(self.case0, k, through=k - 1)

    def nominal_taps(self, k: int) -> np.ndarray:
        return self.design.schedule.setting(self.case0, k).ltc

    def branch(self, increment, n_intervals=1, archive=False, nominal_taps=False) -> Trajectory:
        """Look-ahead from the current state without touching the run.

        ``increment`` (SVC+LS) is added at the current instant; later
        intervals keep it. Pending taps of the run apply unless
        ``nominal_taps``, which uses the nominal schedule's taps instead.
        """
        cfg = self.design.config
        k, t_k = self.k, self.t
        ns = len(self.case0.svcs)
        inc = np.zeros(self.nch) if increment is None else np.asarray(increment, dtype=float)
        ctl = []
        for i in range(n_intervals):
            h = self.held(k + i) if i == 0 else self.applied.setting(self.case0, k + i, through=k - 1)
            taps = self.nominal_taps(k + i) if nominal_taps else h.ltc
            ctl.append((t_k + i * cfg.T_c, ControlVector(h.svc + inc[:ns], h.ls + inc[ns:], taps)))
        return simulate(self.case_k, [], ctl, t_k, t_k + n_intervals * cfg.T_c, cfg.integrator(archive),
                        self.x, self.y)

    def avc_oracle(self, avc_window) -> np.ndarray:
        """Tap decisions from an LV-voltage window, honouring the one-instant pause."""
        k = self.k
        avc = self.design.avc
        dN = np.zeros(len(self.case0.ltcs), dtype=int)
        for i, d in enumerate(self.case0.ltcs):
            if k > 0 and self.applied.ltc[k - 1, i] != 0:
                continue
            s = self.case0.avc_for(d.id)
            dN[i] = ltc_decision(avc_window[:, i], AvcConfig(s.V_r, s.V_db, avc.T_mech, avc.T_c))
        return dN

    def advance(self, increment, taps=None) -> Trajectory:
        """Apply the SVC/LS increment and tap decisions at the current instant; run one interval."""
        k, t_k = self.k, self.t
        ns = len(self.case0.svcs)
        inc = np.asarray(increment, dtype=float)
        if k < self.applied.n_instants:
            self.applied.svc[k] = inc[:ns]
            self.applied.ls[k] = inc[ns:]
            if taps is not None:
                self.applied.ltc[k] = np.asarray(taps, dtype=int)
        elif np.any(inc != 0) or (taps is not None and np.any(taps)):
            raise ValueError("no control instants left in the schedule")
        cfg = self.design.config
        seg = simulate(self.case_k, [], [(t_k, self.applied.setting(self.case0, k))], t_k, t_k + cfg.T_c,
                       self.integ, self.x, self.y)
        self.parts.append(seg)
        self.case_k, self.x, self.y = seg.case_end, seg.final[0], seg.final[1]
        self.k += 1
        return seg

    def finish(self) -> Trajectory:
        """Run out to the scenario end with pending taps; returns the stitched trajectory."""
        sc = self.design.scenario
        n = self.applied.n_instants
        if self.k < n:
            raise ValueError(f"run stopped at instant {self.k} of {n}")
        t_tail = sc.instant(self.k)
        if sc.t_end > t_tail:
            ctl = [(sc.instant(k), self.applied.setting(self.case0, k)) for k in range(self.k, n + self.applied.delay)]
            tail = simulate(self.case_k, [], ctl, t_tail, sc.t_end, self.integ, self.x, self.y)
            self.parts.append(tail)
            self.case_k, self.x, self.y = tail.case_end, tail.final[0], tail.final[1]
        return concat_trajectories(self.parts)

    @property
    def final_voltages(self) -> np.ndarray:
        return self.y[self._nb:].copy()
