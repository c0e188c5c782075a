"""Offline receding-horizon voltage MPC coordinating SVC, load shedding and LTCs.

Each step predicts the horizon with controls held at their current
settings, linearizes the effect of control increments with trajectory
sensitivities and solves one QP. Only the first increment is applied.
LTCs follow a local dead-band rule evaluated on the predicted low-voltage
side; a tap decision at instant k acts at instant k + 2.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .case import ControlVector, PowerSystemCase, scale_loads
from .integrator import IntegratorConfig, Trajectory, simulate
from .model import model_for
from .powerflow import initialize_equilibrium
from .qp import QpProblem, kkt_residual, solve_qp
from .scenarios import ScenarioConfig
from .sensitivity import propagate_sensitivities

SCHEDULE_VERSION = 1


@dataclass
class MpcConfig:
    T_c: float = 3.0
    T_s: float = 0.1
    N_c: int = 5
    N: int = 7
    R: Optional[np.ndarray] = None  # per-bus, per-sample weight; default R_scale * T_s
    R_scale: float = 8.0
    W_SVC: float = 1.0
    W_LS: float = 100.0
    V_ref: float = 1.0
    V_min: float = 0.95
    V_max: float = 1.05
    substeps: int = 1
    reg: float = 1e-6  # Hessian regularization
    slack_weight: float = 1e4

    def __post_init__(self):
        m = self.T_c / self.T_s
        if abs(m - round(m)) > 1e-9 or round(m) < 1:
            raise ValueError(f"T_c / T_s = {m} must be a positive integer")
        if self.N <= self.N_c:
            raise ValueError("prediction horizon N must exceed the control horizon N_c")
        if self.R is not None:
            R = np.asarray(self.R, dtype=float)
            if np.any(R <= 0):
                raise ValueError("R must be positive definite")

    @property
    def M(self) -> int:
        return int(round(self.T_c / self.T_s))

    def R_diag(self, nb: int) -> np.ndarray:
        if self.R is None:
            return np.full(nb, self.R_scale * self.T_s)
        R = np.asarray(self.R, dtype=float)
        return np.full(nb, float(R)) if R.ndim == 0 else R

    def integrator(self, archive=False) -> IntegratorConfig:
        return IntegratorConfig(T_s=self.T_s, substeps=self.substeps, archive=archive)


@dataclass
class AvcConfig:
    V_r: float = 1.0
    V_db: float = 0.02
    T_mech: float = 5.0
    T_c: float = 3.0

    def __post_init__(self):
        if self.V_db <= 0:
            raise ValueError("dead-band must be positive")

    @property
    def lookahead(self) -> int:
        return math.ceil(self.T_mech / self.T_c)


def ltc_decision(V_lv, avc: AvcConfig) -> int:
    """Dead-band rule over the whole window: +1 raises, -1 lowers the LV voltage."""
    V_lv = np.asarray(V_lv, dtype=float)
    if np.all(V_lv <= avc.V_r - avc.V_db / 2):
        return 1
    if np.all(V_lv >= avc.V_r + avc.V_db / 2):
        return -1
    return 0


def ltc_effect_indicator(k: int, i: int, decisions, delay: int = 2) -> int:
    """1 if the LTC decision taken at ``k`` already acts ``i`` instants later.

    ``decisions`` is a set of decision instants or an array of ΔN rows.
    """
    if isinstance(decisions, (set, frozenset, list, tuple)) and all(isinstance(d, (int, np.integer)) for d in decisions):
        is_point = k in decisions
    else:
        arr = np.asarray(decisions)
        is_point = 0 <= k < len(arr) and bool(np.any(arr[k] != 0))
    return int(is_point and i >= delay)


@dataclass
class ControlSchedule:
    """Per-instant increments (SVC, LS) and tap decisions (LTC).

    Increments accumulate: the setting in force from instant k is the base
    setting plus every increment at or before k. A tap decision at k is
    implemented at ``k + delay``.
    """
    t_first: float
    T_c: float
    svc: np.ndarray  # (n_instants, n_svc)
    ls: np.ndarray
    ltc: np.ndarray  # integers in {-1, 0, 1}
    labels: list = field(default_factory=list)
    delay: int = 2
    # optional design data for the online correction, per instant:
    # tail-cost gradient over the SVC/LS channels and segment-end voltages
    grad: Optional[np.ndarray] = None
    v_end: Optional[np.ndarray] = None
    bus_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.svc = np.atleast_2d(np.asarray(self.svc, dtype=float))
        self.ls = np.atleast_2d(np.asarray(self.ls, dtype=float))
        self.ltc = np.atleast_2d(np.asarray(self.ltc)).astype(int)
        n = self.svc.shape[0]
        if self.ls.shape[0] != n or self.ltc.shape[0] != n:
            raise ValueError("schedule blocks must have the same number of instants")
        for name in ("grad", "v_end"):
            v = getattr(self, name)
            if v is not None:
                v = np.atleast_2d(np.asarray(v, dtype=float))
                if v.shape[0] != n:
                    raise ValueError(f"{name} must have one row per instant")
                setattr(self, name, v)

    @classmethod
    def empty(cls, case: PowerSystemCase, n_instants: int, t_first: float, T_c: float):
        return cls(t_first, T_c, np.zeros((n_instants, len(case.svcs))), np.zeros((n_instants, len(case.ls_actuators))),
                   np.zeros((n_instants, len(case.ltcs)), dtype=int), case.channel_labels())

    @property
    def n_instants(self) -> int:
        return self.svc.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.t_first + self.T_c * np.arange(self.n_instants)

    def time(self, k: int) -> float:
        return self.t_first + k * self.T_c

    def increment(self, k: int) -> np.ndarray:
        return np.concatenate([self.svc[k], self.ls[k]])

    def setting(self, case: PowerSystemCase, k: int, through: Optional[int] = None) -> ControlVector:
        """Controls in force from instant ``k``.

        SVC/LS increments count through instant ``through`` (default ``k``);
        taps count decisions implemented at or before ``k``.
        """
        through = k if through is None else through
        base = case.zero_controls()
        j = min(through, self.n_instants - 1)
        svc = base.svc + (self.svc[:j + 1].sum(axis=0) if j >= 0 else 0.0)
        ls = base.ls + (self.ls[:j + 1].sum(axis=0) if j >= 0 else 0.0)
        jt = min(k - self.delay, self.n_instants - 1)
        ltc = base.ltc + (self.ltc[:jt + 1].sum(axis=0) if jt >= 0 else 0.0)
        return ControlVector(svc, ls, ltc)

    def to_controls(self, case: PowerSystemCase) -> list:
        """Piecewise-constant ``(time, ControlVector)`` changes for the simulator."""
        return [(self.time(k), self.setting(case, k)) for k in range(self.n_instants + self.delay)]

    def spacing_ok(self) -> bool:
        nz = self.ltc != 0
        return not np.any(nz[1:] & nz[:-1])

    def copy(self) -> "ControlSchedule":
        cp = lambda a: None if a is None else a.copy()
        return ControlSchedule(self.t_first, self.T_c, self.svc.copy(), self.ls.copy(), self.ltc.copy(),
                               list(self.labels), self.delay, cp(self.grad), cp(self.v_end), list(self.bus_ids))


def write_schedule(schedule: ControlSchedule, path):
    lines = [f"gridmpc-schedule {SCHEDULE_VERSION}", f"t_first {schedule.t_first!r}", f"T_c {schedule.T_c!r}",
             f"delay {schedule.delay}", f"instants {schedule.n_instants}", "# k time channel value"]
    for k in range(schedule.n_instants):
        vals = list(schedule.svc[k]) + list(schedule.ls[k]) + list(schedule.ltc[k])
        for lab, v in zip(schedule.labels, vals):
            lines.append(f"{k} {schedule.time(k)!r} {lab} {float(v)!r}")
        if schedule.grad is not None:
            for lab, v in zip(schedule.labels, schedule.grad[k]):
                lines.append(f"{k} {schedule.time(k)!r} grad:{lab} {float(v)!r}")
        if schedule.v_end is not None:
            for b, v in zip(schedule.bus_ids, schedule.v_end[k]):
                lines.append(f"{k} {schedule.time(k)!r} vend:{b} {float(v)!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


class ScheduleFormatError(ValueError):
    pass


def read_schedule(path) -> ControlSchedule:
    with open(path) as fh:
        rows = [l.strip() for l in fh if l.strip() and not l.startswith("#")]
    if not rows or rows[0].split()[0] != "gridmpc-schedule":
        raise ScheduleFormatError(f"{path}: not a schedule file")
    if int(rows[0].split()[1]) != SCHEDULE_VERSION:
        raise ScheduleFormatError(f"{path}: unsupported schedule version {rows[0].split()[1]}")
    try:
        meta = dict(r.split() for r in rows[1:5])
        n = int(meta["instants"])
        data = [r.split() for r in rows[5:]]
        labels = []
        for k_, _, lab, _ in data:
            if lab not in labels:
                labels.append(lab)
        table = np.zeros((n, len(labels)))
        for k_, _, lab, v in data:
            table[int(k_), labels.index(lab)] = float(v)
    except (KeyError, ValueError) as exc:
        raise ScheduleFormatError(f"{path}: corrupt schedule ({exc})") from exc
    kinds = [l.split(":")[0] for l in labels]
    pick = lambda kind: table[:, [i for i, k in enumerate(kinds) if k == kind]]
    ctl = [l for l, k in zip(labels, kinds) if k in ("svc", "ls", "ltc")]
    grad = pick("grad") if "grad" in kinds else None
    v_end = pick("vend") if "vend" in kinds else None
    bus_ids = [int(l.split(":")[1]) for l, k in zip(labels, kinds) if k == "vend"]
    return ControlSchedule(float(meta["t_first"]), float(meta["T_c"]), pick("svc"), pick("ls"),
                           np.rint(pick("ltc")).astype(int), ctl, int(meta["delay"]), grad, v_end, bus_ids)


# -- QP assembly -----------------------------------------------------------------
@dataclass
class HorizonPrediction:
    """Nominal horizon and its sensitivities at one MPC step.

    ``V_nom``: (N·M, N_b) voltages with controls held. ``S_apply[j]``:
    ((N - j)·M, N_b, n_ch) sensitivities to increments applied j instants
    ahead. ``ltc_offset``: optional (N·M, N_b) voltage offset of the tap
    decision taken at this step.
    """
    V_nom: np.ndarray
    S_apply: list
    ltc_offset: Optional[np.ndarray] = None


def build_qp(pred: HorizonPrediction, config: MpcConfig, lb, ub, room=None, weights=None, slack=False):
    """Assemble the QP in the stacked increments ``z = [Δu_k; …; Δu_{k+N_k-1}]``.

    Returns ``(QpProblem, G, v0)`` where the predicted voltages are
    ``v0 + G z`` (flattened sample-major, bus-minor).
    """
    V = np.asarray(pred.V_nom, dtype=float)
    n_s, nb = V.shape
    M = config.M
    N_k = len(pred.S_apply)
    nch = pred.S_apply[0].shape[2]
    nz = N_k * nch
    G = np.zeros((n_s * nb, nz))
    for j, S in enumerate(pred.S_apply):
        if S.shape != (n_s - j * M, nb, nch):
            raise ValueError(f"S_apply[{j}] has shape {S.shape}, expected {(n_s - j * M, nb, nch)}")
        G[j * M * nb:, j * nch:(j + 1) * nch] = S.reshape(-1, nch)
    v0 = V.reshape(-1).copy()
    if pred.ltc_offset is not None:
        v0 += np.asarray(pred.ltc_offset).reshape(-1)
    Rw = np.tile(config.R_diag(nb), n_s)
    w = np.tile(weights if weights is not None else np.ones(nch), N_k)
    H = 2 * G.T @ (Rw[:, None] * G) + config.reg * np.eye(nz)
    c = 2 * G.T @ (Rw * (v0 - config.V_ref)) + w
    lbz, ubz = np.tile(lb, N_k), np.tile(ub, N_k)
    rows, rhs = [], []
    # terminal band at the end of the horizon
    Gt, vt = G[-nb:], v0[-nb:]
    rows += [Gt, -Gt]
    rhs += [config.V_max - vt, vt - config.V_min]
    if room is not None:  # cumulative device limits
        C = np.tile(np.eye(nch), N_k)
        rows.append(C)
        rhs.append(np.asarray(room, dtype=float))
    A, b = np.vstack(rows), np.concatenate(rhs)
    if slack:
        # one nonnegative slack per bus widens the band on both sides
        Hs = np.zeros((nz + nb, nz + nb))
        Hs[:nz, :nz] = H
        Hs[nz:, nz:] = 2 * config.slack_weight * np.eye(nb)
        cs = np.concatenate([c, np.full(nb, config.slack_weight)])
        As = np.hstack([A, np.zeros((A.shape[0], nb))])
        As[:nb, nz:] = -np.eye(nb)
        As[nb:2 * nb, nz:] = -np.eye(nb)
        return QpProblem(Hs, cs, As, b, np.concatenate([lbz, np.zeros(nb)]),
                         np.concatenate([ubz, np.full(nb, np.inf)])), G, v0
    return QpProblem(H, c, A, b, lbz, ubz), G, v0


def channel_bounds(case: PowerSystemCase, config: MpcConfig):
    """Per-step bounds and linear weights for the SVC and LS channels."""
    lb = np.array([d.u_min for d in case.svcs] + [d.u_min for d in case.ls_actuators])
    ub = np.array([d.u_max for d in case.svcs] + [d.u_max for d in case.ls_actuators])
    w = np.array([config.W_SVC] * len(case.svcs) + [config.W_LS] * len(case.ls_actuators))
    return lb, ub, w


def remaining_room(case: PowerSystemCase, cv: ControlVector) -> np.ndarray:
    """Cumulative headroom per SVC/LS channel given the setting ``cv``."""
    room_svc = np.array([d.b_max for d in case.svcs]) - cv.svc
    P0 = np.array([case.loads[case.load_at(d.bus)].P0 for d in case.ls_actuators])
    return np.maximum(np.concatenate([room_svc, P0 - cv.ls]), 0.0)


def solve_with_fallback(pred, config, lb, ub, room, w, tol=1e-8):
    """Solve the QP; if infeasible, widen the terminal band with penalized slack."""
    prob, G, v0 = build_qp(pred, config, lb, ub, room, w)
    sol = solve_qp(prob, tol=tol)
    slack = None
    if not sol.ok:
        prob, G, v0 = build_qp(pred, config, lb, ub, room, w, slack=True)
        sol = solve_qp(prob, tol=tol)
        nz = G.shape[1]
        slack = sol.z[nz:].copy()
    return prob, sol, G, v0, slack


def tracking_gradient(V_seg, S_seg, config: MpcConfig, weights) -> np.ndarray:
    """Gradient at zero of the single-segment objective in the channel increments."""
    V_seg = np.asarray(V_seg, dtype=float)
    R = config.R_diag(V_seg.shape[1])
    return 2 * np.einsum("sbc,b,sb->c", np.asarray(S_seg), R, V_seg - config.V_ref) + weights


@dataclass
class StepRecord:
    k: int
    t: float
    increment: np.ndarray
    ltc: np.ndarray
    status: str
    kkt: float
    objective: float
    slack: Optional[np.ndarray]
    wall_time: float
    n_vars: int
    tail_grad: Optional[np.ndarray] = None


@dataclass
class MpcResult:
    schedule: ControlSchedule
    trajectory: Trajectory
    steps: list
    case: PowerSystemCase  # initialized plant case at t = 0

    @property
    def step_times(self) -> np.ndarray:
        return np.array([s.wall_time for s in self.steps])


def concat_trajectories(parts: list) -> Trajectory:
    first, last = parts[0], parts[-1]
    return Trajectory(np.concatenate([p.t for p in parts]), np.vstack([p.x for p in parts]),
                      np.vstack([p.y for p in parts]), np.vstack([p.u for p in parts]), first.nb, first.T_s,
                      first.t0, last.final, last.case_end)


def predict_horizon(case_k, x, y, t_k, schedule: ControlSchedule, k: int, n_instants: int, config: MpcConfig,
                    archive=True) -> Trajectory:
    """Simulate from instant ``k`` with SVC/LS held and known taps applied."""
    ctl = [(t_k + i * config.T_c, schedule.setting(case_k, k + i, through=k - 1)) for i in range(n_instants)]
    return simulate(case_k, [], ctl, t_k, t_k + n_instants * config.T_c, config.integrator(archive), x, y)


def run_receding_horizon(case: PowerSystemCase, scenario: ScenarioConfig, config: Optional[MpcConfig] = None,
                         avc: Optional[AvcConfig] = None, apply_load_factor=True, verbose=False) -> MpcResult:
    """Offline MPC over ``N_c`` instants on the (optionally load-scaled) case."""
    config = config or MpcConfig()
    avc = avc or AvcConfig(T_c=config.T_c)
    if abs(scenario.T_c - config.T_c) > 1e-12 or scenario.N_c != config.N_c:
        raise ValueError("scenario grid and MPC config disagree on T_c / N_c")
    scenario.check_grid(config.T_s)
    if apply_load_factor:
        case = scale_loads(case, scenario.load_factor)
    eq = initialize_equilibrium(case)
    case0 = eq.case
    model0 = model_for(case0)
    M, N = config.M, config.N
    integ = config.integrator()
    delay = avc.lookahead
    schedule = ControlSchedule.empty(case0, config.N_c, scenario.t_first, config.T_c)
    schedule.delay = delay
    schedule.grad = np.zeros((config.N_c, schedule.svc.shape[1] + schedule.ls.shape[1]))
    schedule.v_end = np.zeros((config.N_c, model0.nb))
    schedule.bus_ids = [b.id for b in case0.buses]
    lb, ub, w = channel_bounds(case0, config)
    nch = len(lb)
    t_cols = list(range(nch, nch + model0.nt))
    ltc_labels = case0.channel_labels()[nch:]
    lv_rows = model0.bus_rows([d.lv_bus for d in case0.ltcs])
    avcs = [case0.avc_for(d.id) for d in case0.ltcs]

    pre = simulate(case0, scenario.events(case0), [], 0.0, scenario.t_first, integ, eq.x, eq.y)
    parts = [pre]
    case_k, (x, y, _) = pre.case_end, pre.final
    steps = []
    for k in range(config.N_c):
        t_k = scenario.instant(k)
        N_k = config.N_c - k
        start = time.perf_counter()
        pred = predict_horizon(case_k, x, y, t_k, schedule, k, N, config)
        # AVC on the held-control prediction
        dN = np.zeros(model0.nt, dtype=int)
        for i, row in enumerate(lv_rows):
            if k > 0 and schedule.ltc[k - 1, i] != 0:
                continue  # one decision, then a pause
            cfg = AvcConfig(avcs[i].V_r, avcs[i].V_db, avc.T_mech, avc.T_c)
            dN[i] = ltc_decision(pred.V[:delay * M, row], cfg)
        cols = list(range(nch))
        S_apply = [propagate_sensitivities(pred, t_a=t_k + j * config.T_c, n_samples=(N - j) * M, case=case_k,
                                           cols=cols, labels=schedule.labels[:nch]).S for j in range(N_k)]
        offset = None
        if np.any(dN):
            S_ltc = propagate_sensitivities(pred, t_a=t_k + delay * config.T_c, n_samples=(N - delay) * M,
                                            case=case_k, cols=t_cols, labels=ltc_labels).S
            offset = np.zeros_like(pred.V)
            offset[delay * M:] = S_ltc @ (dN * model0.t_step)
        held = schedule.setting(case0, k, through=k - 1)
        room = remaining_room(case0, held)
        prob, sol, G, v0, slack = solve_with_fallback(HorizonPrediction(pred.V, S_apply, offset), config,
                                                      lb, ub, room, w)
        du = np.clip(sol.z[:nch], lb, ub)
        du[np.abs(du) < 1e-10] = 0.0  # solver round-off
        wall = time.perf_counter() - start
        schedule.svc[k] = du[:len(case0.svcs)]
        schedule.ls[k] = du[len(case0.svcs):]
        schedule.ltc[k] = dN
        if verbose:
            print(f"k={k} t={t_k:.1f} du={np.round(du, 4)} ltc={dN} status={sol.status} {wall:.3f}s")
        seg = simulate(case_k, [], [(t_k, schedule.setting(case0, k))], t_k, t_k + config.T_c,
                       config.integrator(archive=True), x, y)
        # what the one-segment objective misses of the full one at the optimum
        S_seg = propagate_sensitivities(seg, t_a=t_k, n_samples=M, case=case_k, cols=cols).S
        g_full = (prob.H @ sol.z + prob.c + prob.A.T @ sol.lam)[:nch]
        schedule.grad[k] = g_full - tracking_gradient(seg.V, S_seg, config, w)
        schedule.v_end[k] = seg.V[-1]
        steps.append(StepRecord(k, t_k, du, dN, sol.status, kkt_residual(prob, sol.z, sol), sol.objective,
                                slack, wall, G.shape[1], schedule.grad[k].copy()))
        parts.append(seg)
        case_k, (x, y, _) = seg.case_end, seg.final
    # run out the tail with pending taps
    t_tail = scenario.instant(config.N_c)
    if scenario.t_end > t_tail:
        ctl = [(scenario.instant(k), schedule.setting(case0, k)) for k in range(config.N_c, config.N_c + delay)]
        tail = simulate(case_k, [], ctl, t_tail, scenario.t_end, integ, x, y)
        parts.append(tail)
    return MpcResult(schedule, concat_trajectories(parts), steps, case0)
