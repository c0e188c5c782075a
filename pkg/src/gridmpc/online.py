"""Online correction of the nominal schedule on a perturbed plant.

At each instant the nominal-control segment and its sensitivities are
predicted (by the surrogates, or by the simulator for reference), the AVC
rule decides taps from a predicted LV window, and a single-segment QP
corrects the nominal SVC/LS increment. Only prediction and QP solve are
timed.
"""
from __future__ import annotations

import csv
import dataclasses
import os
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .datasets import flatten_block, unflatten_block, unflatten_sensitivity
from .integrator import Trajectory
from .mpc import HorizonPrediction, channel_bounds, remaining_room, solve_with_fallback
from .nn import MlpModel, load_model, mlp_forward, save_model
from .plant import NominalDesign, PlantRun
from .qp import kkt_residual
from .sensitivity import channel_columns, propagate_sensitivities

MODEL_FILES = {"prediction": "prediction.mlp", "sensitivity": "sensitivity.mlp", "avc": "avc.mlp"}


@dataclass
class Surrogates:
    prediction: MlpModel
    sensitivity: MlpModel
    avc: MlpModel

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        for kind, fname in MODEL_FILES.items():
            save_model(getattr(self, kind), os.path.join(directory, fname))

    @classmethod
    def load(cls, directory) -> "Surrogates":
        return cls(**{kind: load_model(os.path.join(directory, f)) for kind, f in MODEL_FILES.items()})


@dataclass
class MeasurementBuffer:
    t: np.ndarray
    V: np.ndarray  # (M, N_b)
    lv_rows: np.ndarray

    def __post_init__(self):
        self.V = np.asarray(self.V, dtype=float)
        if len(self.t) != len(self.V):
            raise ValueError("timestamps and samples differ in length")

    @property
    def V_lv(self) -> np.ndarray:
        return self.V[:, self.lv_rows]


def predict_nominal(f1: MlpModel, V_prev, u_nom) -> np.ndarray:
    """Voltages over the coming interval under the nominal increment, (M, N_b)."""
    V_prev = np.asarray(V_prev, dtype=float)
    x = np.concatenate([flatten_block(V_prev), np.asarray(u_nom, dtype=float)])
    return unflatten_block(mlp_forward(f1, x), V_prev.shape[1])


def predict_sensitivity(f2: MlpModel, V_bar, n_channels: int) -> np.ndarray:
    """Per-sample sensitivities for every channel, (M, N_b, n_channels)."""
    V_bar = np.asarray(V_bar, dtype=float)
    out = mlp_forward(f2, flatten_block(V_bar))
    if out.size != V_bar.size * n_channels:
        raise ValueError(f"sensitivity model emits {out.size} values, expected {V_bar.size * n_channels}")
    return unflatten_sensitivity(out, V_bar.shape[1], n_channels)


def avc_predict(f3: MlpModel, V_lv_prev) -> np.ndarray:
    """LV voltages over the next two intervals with controls held, (2M, n_lv)."""
    V_lv_prev = np.asarray(V_lv_prev, dtype=float)
    return unflatten_block(mlp_forward(f3, flatten_block(V_lv_prev)), V_lv_prev.shape[1])


@dataclass
class OnlineConfig:
    R: np.ndarray  # per-bus, per-sample tracking weight
    w: np.ndarray  # linear weight per SVC/LS channel
    u_min: np.ndarray  # per-step increment bounds
    u_max: np.ndarray
    V_min: float = 0.95
    V_max: float = 1.05
    tail_gradient: bool = True  # add the stored tail-cost gradient to w
    nominal_band: bool = True  # widen the band where the nominal design ends outside it

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float)
        for name in ("w", "u_min", "u_max"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(self.R <= 0):
            raise ValueError("R must be positive definite")
        if np.any(self.u_min > self.u_max) or self.V_min >= self.V_max:
            raise ValueError("inconsistent bounds")

    @classmethod
    def from_design(cls, design: NominalDesign, case0=None, **kw) -> "OnlineConfig":
        case0 = case0 or design.case
        lb, ub, w = channel_bounds(case0, design.config)
        return cls(design.config.R_diag(len(case0.buses)), w, lb, ub, design.config.V_min,
                   design.config.V_max, **kw)


@dataclass
class CorrectionSolution:
    du: np.ndarray
    status: str
    kkt: float
    slack: Optional[np.ndarray]
    V_hat: np.ndarray


def single_step_correction(V_bar, S_ctrl, u_nom, config: OnlineConfig, design: NominalDesign, k: int,
                           S_ltc=None, du_ltc=None, room=None) -> CorrectionSolution:
    """Correction Δu of the nominal increment at instant ``k``.

    ``V̂ = V̄ + S_ctrl·Δu + S_ltc·Δu^LTC`` over one interval, tracked to
    ``V_ref`` with ``R``; bounds ``u_min <= u_nom + Δu <= u_max`` and the
    cumulative ``room``; band at the interval end. Infeasible bands are
    relaxed with penalized slack.
    """
    V_bar = np.asarray(V_bar, dtype=float)
    u_nom = np.asarray(u_nom, dtype=float)
    v0 = V_bar.copy()
    if S_ltc is not None and du_ltc is not None and np.any(du_ltc):
        v0 = v0 + np.asarray(S_ltc) @ np.asarray(du_ltc, dtype=float)
    lo = config.u_min - u_nom
    hi = config.u_max if room is None else np.minimum(config.u_max, room)
    hi = np.maximum(hi - u_nom, lo)
    sched = design.schedule
    V_lo, V_hi = config.V_min, config.V_max
    if config.nominal_band and sched.v_end is not None and k < sched.n_instants:
        V_lo = np.minimum(V_lo, sched.v_end[k])
        V_hi = np.maximum(V_hi, sched.v_end[k])
    w = config.w.copy()
    if config.tail_gradient and sched.grad is not None and k < sched.n_instants:
        w = w + sched.grad[k]
    mcfg = dataclasses.replace(design.config, R=config.R, V_min=V_lo, V_max=V_hi)
    prob, sol, G, v0f, slack = solve_with_fallback(HorizonPrediction(v0, [np.asarray(S_ctrl)]), mcfg,
                                                   lo, hi, None, w)
    n = len(u_nom)
    du = np.clip(sol.z[:n], lo, hi)
    V_hat = (v0f + G @ du).reshape(V_bar.shape)
    return CorrectionSolution(du, sol.status, kkt_residual(prob, sol.z, sol), slack, V_hat)


@dataclass
class CorrectionRecord:
    k: int
    t: float
    u_nom: np.ndarray
    du: np.ndarray
    u_real: np.ndarray
    du_ltc: np.ndarray
    taps: np.ndarray
    solve_time: float
    seg_error: float  # RMS of predicted minus realized voltages over the interval
    status: str = "optimal"
    slack: Optional[np.ndarray] = None


class SurrogatePredictor:
    def __init__(self, models: Surrogates, n_channels: int):
        self.models = models
        self.n_channels = n_channels

    def __call__(self, run: PlantRun, meas: MeasurementBuffer, u_nom):
        V_bar = predict_nominal(self.models.prediction, meas.V, u_nom)
        S = predict_sensitivity(self.models.sensitivity, V_bar, self.n_channels)
        V_lv = avc_predict(self.models.avc, meas.V_lv)
        return V_bar, S, V_lv


class SimulatorPredictor:
    """Full-model reference: the same quantities from simulator look-aheads."""

    def __init__(self, n_channels: int):
        self.n_channels = n_channels

    def __call__(self, run: PlantRun, meas: MeasurementBuffer, u_nom):
        br = run.branch(u_nom, archive=True, nominal_taps=True)
        cols, _ = channel_columns(run.case0)
        S = propagate_sensitivities(br, t_a=run.t, n_samples=run.design.M, case=run.case_k, cols=cols).S
        held = run.branch(None, n_intervals=2)
        return br.V, S, held.V[:, run.lv_rows]


@dataclass
class TimingReport:
    per_step_ms: list = field(default_factory=list)

    @property
    def mean_ms(self) -> float:
        return float(np.mean(self.per_step_ms)) if self.per_step_ms else 0.0

    @property
    def max_ms(self) -> float:
        return float(np.max(self.per_step_ms)) if self.per_step_ms else 0.0


@dataclass
class OnlineResult:
    records: list
    trajectory: Trajectory
    timing: TimingReport
    load_factor: float
    final_V: np.ndarray

    @property
    def cumulative_control(self) -> float:
        return float(sum(np.sum(r.u_real) for r in self.records))

    def band_ok(self, V_min=0.95, V_max=1.05) -> bool:
        return bool(np.all(self.final_V >= V_min) and np.all(self.final_V <= V_max))


def run_online_loop(design: NominalDesign, load_factor: float, models: Optional[Surrogates] = None,
                    config: Optional[OnlineConfig] = None, predictor=None) -> OnlineResult:
    """Closed loop over the control instants; surrogates unless ``predictor`` is given."""
    run = PlantRun(design, load_factor)
    case0 = run.case0
    config = config or OnlineConfig.from_design(design, case0)
    cols, labels = channel_columns(case0)
    n_all, nch = len(cols), run.nch
    if predictor is None:
        if models is None:
            raise ValueError("need surrogate models or a predictor")
        predictor = SurrogatePredictor(models, n_all)
    sched = design.schedule
    t_step = run.model.t_step
    M = design.M
    records, timing = [], TimingReport()
    for k in range(design.N_c):
        V = run.measurement()
        t_k = run.t
        meas = MeasurementBuffer(t_k - design.config.T_c + design.config.T_s * np.arange(M), V, run.lv_rows)
        u_nom = sched.increment(k)
        held = run.held()
        du_ltc = (held.ltc - run.nominal_taps(k)) * t_step
        room = remaining_room(case0, held)
        start = time.perf_counter()
        V_bar, S, V_lv = predictor(run, meas, u_nom)
        taps = run.avc_oracle(V_lv[:design.avc.lookahead * M])
        corr = single_step_correction(V_bar, S[:, :, :nch], u_nom, config, design, k, S[:, :, nch:], du_ltc, room)
        elapsed = time.perf_counter() - start
        u_real = np.clip(u_nom + corr.du, config.u_min, config.u_max)
        seg = run.advance(u_real, taps)
        err = float(np.sqrt(np.mean((corr.V_hat - seg.V) ** 2)))
        timing.per_step_ms.append(1e3 * elapsed)
        records.append(CorrectionRecord(k, t_k, u_nom, corr.du, u_real, du_ltc, taps, elapsed, err, corr.status,
                                        corr.slack))
    traj = run.finish()
    return OnlineResult(records, traj, timing, float(load_factor), run.final_voltages)


def write_corrections_csv(result: OnlineResult, path, labels):
    """One row per correction record; ``labels`` name the SVC/LS then LTC channels."""
    nch = len(result.records[0].u_nom) if result.records else 0
    ctl, taps = labels[:nch], labels[nch:]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "t"] + [f"nom:{l}" for l in ctl] + [f"du:{l}" for l in ctl] + [f"real:{l}" for l in ctl]
                   + [f"dratio:{l}" for l in taps] + [f"tap:{l}" for l in taps]
                   + ["solve_ms", "seg_rmse", "status"])
        for r in result.records:
            w.writerow([r.k, f"{r.t:.6g}"] + [f"{v:.6g}" for v in np.concatenate([r.u_nom, r.du, r.u_real, r.du_ltc])]
                       + [int(v) for v in r.taps] + [f"{1e3 * r.solve_time:.6g}", f"{r.seg_error:.6g}", r.status])


def write_timing_csv(timing: TimingReport, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "ms"])
        for i, v in enumerate(timing.per_step_ms):
            w.writerow([i, f"{v:.6g}"])
        w.writerow(["mean", f"{timing.mean_ms:.6g}"])
        w.writerow(["max", f"{timing.max_ms:.6g}"])
