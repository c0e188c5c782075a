"""Training data for the three surrogates, generated on load-perturbed plants.

Each scenario draws a load factor, runs the perturbed plant under the
nominal schedule (optionally with random exploration increments, taps
from the AVC rule) and records at every control instant k:

* prediction: ``[V_{k-1:k}, u_k,nom] -> V_{k:k+1}`` under the nominal increment
  and nominal taps;
* sensitivity: ``V_{k:k+1} -> S_{k:k+1}`` for every SVC, LS and LTC channel;
* AVC: ``V^lv_{k-1:k} -> V^lv_{k:k+2}`` with controls held and pending taps.

Trajectory blocks are flattened bus-major: all samples of the first bus,
then the next bus. Sensitivity targets are ``(bus, sample)`` rows by
channel columns, flattened row-major.
"""
from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .integrator import CollapseError
from .model import ModelDomainError
from .mpc import remaining_room, channel_bounds
from .plant import NominalDesign, PlantRun
from .powerflow import DivergedCaseError, initialize_equilibrium
from .sensitivity import channel_columns, propagate_sensitivities

log = logging.getLogger(__name__)

KINDS = ("prediction", "sensitivity", "avc")
HIDDEN = {"prediction": (256, 256), "sensitivity": (256, 256), "avc": (64, 64)}


@dataclass
class DataConfig:
    n_scenarios: int = 2500
    load_range: tuple = (0.8, 1.2)
    seed: int = 0
    explore: float = 0.5  # fraction of runs with random increments on top of the nominal ones
    explore_svc: float = 0.2
    explore_ls: float = 0.1
    workers: int = 1

    def __post_init__(self):
        lo, hi = self.load_range
        if not 0 < lo <= hi:
            raise ValueError("bad load range")
        if self.n_scenarios < 1:
            raise ValueError("need at least one scenario")


@dataclass
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    in_labels: list
    out_labels: list
    train_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    test_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    name: str = ""

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.Y = np.atleast_2d(np.asarray(self.Y, dtype=float))
        if len(self.X) != len(self.Y):
            raise ValueError("input and target row counts differ")
        if self.in_labels and len(self.in_labels) != self.X.shape[1]:
            raise ValueError("input labels do not match columns")
        if self.out_labels and len(self.out_labels) != self.Y.shape[1]:
            raise ValueError("target labels do not match columns")
        self.train_idx = np.asarray(self.train_idx, dtype=int)
        self.test_idx = np.asarray(self.test_idx, dtype=int)
        if len(self.train_idx) + len(self.test_idx) == 0 and len(self.X):
            self.split()
        both = np.concatenate([self.train_idx, self.test_idx])
        if len(np.unique(both)) != len(both) or len(both) != len(self.X):
            raise ValueError("split must be disjoint and exhaustive")

    def __len__(self):
        return len(self.X)

    def split(self, frac=0.7, seed=0):
        order = np.random.default_rng(seed).permutation(len(self.X))
        n_train = int(round(frac * len(self.X)))
        self.train_idx, self.test_idx = np.sort(order[:n_train]), np.sort(order[n_train:])
        return self

    @property
    def train(self):
        return self.X[self.train_idx], self.Y[self.train_idx]

    @property
    def test(self):
        return self.X[self.test_idx], self.Y[self.test_idx]


def flatten_block(V) -> np.ndarray:
    """(samples, buses) -> bus-major vector."""
    return np.asarray(V).T.ravel()


def unflatten_block(v, n_buses: int) -> np.ndarray:
    """Inverse of :func:`flatten_block`; returns (samples, buses)."""
    v = np.asarray(v)
    return v.reshape(n_buses, -1).T


def flatten_sensitivity(S) -> np.ndarray:
    """(samples, buses, channels) -> rows (bus, sample) by channel, row-major."""
    S = np.asarray(S)
    return S.transpose(1, 0, 2).reshape(-1).copy()


def unflatten_sensitivity(v, n_buses: int, n_channels: int) -> np.ndarray:
    v = np.asarray(v)
    return v.reshape(n_buses, -1, n_channels).transpose(1, 0, 2)


def dedup_rows(X, Y, quantum=1e-9):
    """Drop rows whose quantized input+target duplicate an earlier one."""
    if len(X) == 0:
        return X, Y
    Q = np.rint(np.hstack([X, Y]) / quantum).astype(np.int64)
    _, first = np.unique(Q, axis=0, return_index=True)
    keep = np.sort(first)
    return X[keep], Y[keep]


def _labels(design: NominalDesign, case0):
    M = design.M
    bus_ids = [b.id for b in case0.buses]
    lv_ids = list(case0.lv_buses)
    _, ch_all = channel_columns(case0)
    nch = len(case0.svcs) + len(case0.ls_actuators)
    V = lambda ids, n: [f"V{b}[{i}]" for b in ids for i in range(n)]
    lab = {
        "prediction": (V(bus_ids, M) + [f"u:{c}" for c in ch_all[:nch]], V(bus_ids, M)),
        "sensitivity": (V(bus_ids, M), [f"S{b}[{i}]/{c}" for b in bus_ids for i in range(M) for c in ch_all]),
        "avc": (V(lv_ids, M), V(lv_ids, 2 * M)),
    }
    return lab


def _explore_increment(run: PlantRun, nominal, cfg: DataConfig, rng) -> np.ndarray:
    lb, ub, _ = channel_bounds(run.case0, run.design.config)
    ns = len(run.case0.svcs)
    d = np.zeros_like(nominal)
    d[:ns] = rng.uniform(-cfg.explore_svc, cfg.explore_svc, ns)
    d[ns:] = rng.uniform(0.0, cfg.explore_ls, len(nominal) - ns) * (rng.random(len(nominal) - ns) < 0.3)
    room = remaining_room(run.case0, run.held())
    return np.clip(nominal + d, lb, np.maximum(np.minimum(ub, room), lb))


def scenario_rows(design: NominalDesign, load_factor: float, seed: int, cfg: DataConfig, kinds=KINDS):
    """All rows from one perturbed run; raises on collapse."""
    rng = np.random.default_rng(seed)
    run = PlantRun(design, load_factor)
    explore = rng.random() < cfg.explore
    nom = design.schedule
    M, N_c = design.M, design.N_c
    cols_all, _ = channel_columns(run.case0)
    rows = {k: ([], []) for k in kinds}
    lv = run.lv_rows
    for k in range(N_c + 1):
        u_nom = nom.increment(k) if k < N_c else np.zeros(run.nch)
        V_prev = run.measurement()
        need_sens = "sensitivity" in kinds
        if k < N_c or need_sens:
            br = run.branch(u_nom, archive=need_sens, nominal_taps=True)
            if "prediction" in kinds and k < N_c:
                rows["prediction"][0].append(np.concatenate([flatten_block(V_prev), u_nom]))
                rows["prediction"][1].append(flatten_block(br.V))
            if need_sens:
                S = propagate_sensitivities(br, t_a=run.t, n_samples=M, case=run.case_k, cols=cols_all).S
                rows["sensitivity"][0].append(flatten_block(br.V))
                rows["sensitivity"][1].append(flatten_sensitivity(S))
        if k == N_c:
            break
        held = run.branch(None, n_intervals=2)
        V_lv = held.V[:, lv]
        if "avc" in kinds:
            rows["avc"][0].append(flatten_block(V_prev[:, lv]))
            rows["avc"][1].append(flatten_block(V_lv))
        taps = run.avc_oracle(V_lv[:design.avc.lookahead * M])
        inc = _explore_increment(run, u_nom, cfg, rng) if explore else u_nom
        run.advance(inc, taps)
    return {k: (np.array(x), np.array(y)) for k, (x, y) in rows.items()}


def _scenario_job(args):
    design, lf, seed, cfg, kinds = args
    try:
        return scenario_rows(design, lf, seed, cfg, kinds)
    except (CollapseError, DivergedCaseError, ModelDomainError, np.linalg.LinAlgError) as exc:
        return f"load factor {lf:.4f}: {type(exc).__name__}: {exc}"


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("GRIDMPC_THREADS", "1")))
    except ValueError:
        return 1


def generate_datasets(design: NominalDesign, cfg: Optional[DataConfig] = None, kinds: Sequence[str] = KINDS,
                      dedup=True) -> dict:
    """Generate the requested datasets in one pass over the scenarios."""
    cfg = cfg or DataConfig()
    bad = set(kinds) - set(KINDS)
    if bad:
        raise ValueError(f"unknown dataset kinds {sorted(bad)}")
    root = np.random.default_rng(cfg.seed)
    lfs = root.uniform(*cfg.load_range, size=cfg.n_scenarios)
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(cfg.seed).spawn(cfg.n_scenarios)]
    jobs = [(design, float(lf), s, cfg, tuple(kinds)) for lf, s in zip(lfs, seeds)]
    workers = cfg.workers if cfg.workers > 0 else default_workers()
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_scenario_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        results = [_scenario_job(j) for j in jobs]
    skipped = [r for r in results if isinstance(r, str)]
    for msg in skipped:
        log.warning("scenario skipped (%s)", msg)
    good = [r for r in results if not isinstance(r, str)]
    if not good:
        raise RuntimeError("every scenario failed; no data generated")
    labels = _labels(design, initialize_equilibrium(design.case).case)
    out = {}
    for kind in kinds:
        X = np.vstack([g[kind][0] for g in good if len(g[kind][0])])
        Y = np.vstack([g[kind][1] for g in good if len(g[kind][1])])
        if dedup:
            X, Y = dedup_rows(X, Y)
        out[kind] = Dataset(X, Y, *labels[kind], name=kind).split(seed=cfg.seed)
    out["skipped"] = skipped
    return out


def generate_prediction_dataset(design, cfg=None) -> Dataset:
    return generate_datasets(design, cfg, ("prediction",))["prediction"]


def generate_sensitivity_dataset(design, cfg=None) -> Dataset:
    return generate_datasets(design, cfg, ("sensitivity",))["sensitivity"]


def generate_avc_dataset(design, cfg=None) -> Dataset:
    return generate_datasets(design, cfg, ("avc",))["avc"]


# -- CSV ------------------------------------------------------------------------
def write_dataset_csv(ds: Dataset, path):
    """One row per sample: split flag, then labeled inputs and targets."""
    split = np.zeros(len(ds), dtype=int)
    split[ds.test_idx] = 1
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["test"] + [f"x:{l}" for l in ds.in_labels] + [f"y:{l}" for l in ds.out_labels])
        for i in range(len(ds)):
            w.writerow([split[i]] + [repr(float(v)) for v in ds.X[i]] + [repr(float(v)) for v in ds.Y[i]])


def read_dataset_csv(path, name="") -> Dataset:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        data = np.array([[float(v) for v in row] for row in r]).reshape(-1, len(header))
    xi = [i for i, h in enumerate(header) if h.startswith("x:")]
    yi = [i for i, h in enumerate(header) if h.startswith("y:")]
    if header[0] != "test" or len(xi) + len(yi) + 1 != len(header):
        raise ValueError(f"{path}: not a dataset file")
    test = data[:, 0].astype(bool)
    return Dataset(data[:, xi], data[:, yi], [header[i][2:] for i in xi], [header[i][2:] for i in yi],
                   np.flatnonzero(~test), np.flatnonzero(test), name)
