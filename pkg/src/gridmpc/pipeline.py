"""End-to-end stages shared by the CLI and the acceptance suite."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from typing import Optional, Sequence

from .casefile import load_case
from .datasets import HIDDEN, KINDS, DataConfig, Dataset, generate_datasets, read_dataset_csv, write_dataset_csv
from .mpc import AvcConfig, MpcConfig, read_schedule, run_receding_horizon, write_schedule
from .nn import TrainConfig, mlp_forward, r2_score, train_adam
from .online import MODEL_FILES, OnlineConfig, Surrogates, run_online_loop
from .plant import NominalDesign, design_nominal
from .report import BenchmarkReport, RunSummary
from .scenarios import get_scenario

log = logging.getLogger(__name__)

BENCH_LOADS = (0.8, 0.9, 1.1, 1.2)


@dataclass(frozen=True)
class Profile:
    name: str
    T_s: float
    substeps: int
    n_scenarios: int
    epochs: int
    lr_decay: float


PROFILES = {
    "default": Profile("default", 0.1, 1, 2500, 200, 0.99),
    # coarser sampling over the same 0.1 s integration step
    "fast": Profile("fast", 0.5, 5, 100, 600, 0.996),
}


def get_profile(fast: bool) -> Profile:
    return PROFILES["fast" if fast else "default"]


def mpc_config(profile: Profile) -> MpcConfig:
    return MpcConfig(T_s=profile.T_s, substeps=profile.substeps)


def build_design(case_name="9bus", scenario_name: Optional[str] = None, profile: Profile = PROFILES["default"],
                 schedule_path=None) -> NominalDesign:
    """Nominal design from a stored schedule, or by running the offline MPC."""
    case = load_case(case_name)
    scenario = get_scenario(scenario_name or default_scenario(case_name))
    config = mpc_config(profile)
    if schedule_path is not None:
        schedule = read_schedule(schedule_path)
        if abs(schedule.T_c - config.T_c) > 1e-12 or abs(schedule.t_first - scenario.t_first) > 1e-12:
            raise ValueError(f"{schedule_path}: schedule grid does not match the scenario")
        if schedule.grad is None or schedule.v_end is None:
            log.warning("%s has no design data; online corrections use the plain objective", schedule_path)
        return NominalDesign(case, scenario, config, schedule, AvcConfig(T_c=config.T_c))
    return design_nominal(case, scenario, config)


def default_scenario(case_name: str) -> str:
    return "fault15" if "39" in str(case_name) else "fault5"


def make_datasets(design: NominalDesign, profile: Profile, seed=0, workers=0) -> dict:
    return generate_datasets(design, DataConfig(n_scenarios=profile.n_scenarios, seed=seed, workers=workers))


def save_datasets(datasets: dict, directory):
    os.makedirs(directory, exist_ok=True)
    for kind in KINDS:
        if kind in datasets:
            write_dataset_csv(datasets[kind], os.path.join(directory, f"{kind}.csv"))


def load_datasets(directory) -> dict:
    out = {}
    for kind in KINDS:
        path = os.path.join(directory, f"{kind}.csv")
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing dataset {path}")
        out[kind] = read_dataset_csv(path, kind)
    return out


def train_surrogates(datasets: dict, profile: Profile, seed=0):
    """Train the three networks; returns ``(Surrogates, {kind: test R²})``."""
    models, r2 = {}, {}
    cfg = TrainConfig(epochs=profile.epochs, lr_decay=profile.lr_decay, seed=seed)
    for kind in KINDS:
        ds: Dataset = datasets[kind]
        m, _ = train_adam(*ds.train, HIDDEN[kind], cfg)
        Xt, Yt = ds.test
        r2[kind] = r2_score(mlp_forward(m, Xt), Yt)
        log.info("%s: test R^2 = %.4f", kind, r2[kind])
        models[kind] = m
    return Surrogates(**models), r2


def offline_step_times(design: NominalDesign) -> list:
    res = run_receding_horizon(design.case, design.scenario, design.config, design.avc)
    return [s.wall_time for s in res.steps]


def benchmark(design: NominalDesign, models: Surrogates, load_factors: Sequence[float] = BENCH_LOADS,
              r2: Optional[dict] = None, case_name="9bus") -> BenchmarkReport:
    report = BenchmarkReport(case_name, offline_step_times(design), r2=dict(r2 or {}))
    for lf in load_factors:
        res = run_online_loop(design, lf, models, OnlineConfig.from_design(design))
        report.runs.append(RunSummary(lf, res.band_ok(design.config.V_min, design.config.V_max),
                                      float(res.final_V.min()), float(res.final_V.max()),
                                      res.cumulative_control, [r.solve_time for r in res.records]))
    return report


def save_design(design: NominalDesign, path):
    write_schedule(design.schedule, path)


def models_present(directory) -> bool:
    return directory is not None and all(os.path.exists(os.path.join(directory, f)) for f in MODEL_FILES.values())

