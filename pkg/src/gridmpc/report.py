"""Benchmark summary and fixed-precision CSV / markdown tables."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


def fmt(v) -> str:
    """Numbers at 6 significant digits; everything else as text."""
    if isinstance(v, (bool, np.bool_)):
        return "yes" if v else "no"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return str(v)


@dataclass
class Table:
    header: list
    rows: list = field(default_factory=list)

    def add(self, *row):
        if len(row) != len(self.header):
            raise ValueError(f"row has {len(row)} cells, header {len(self.header)}")
        self.rows.append([fmt(v) for v in row])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header)
            w.writerows(self.rows)

    def markdown(self) -> str:
        lines = ["| " + " | ".join(self.header) + " |", "|" + "---|" * len(self.header)]
        lines += ["| " + " | ".join(r) + " |" for r in self.rows]
        return "\n".join(lines) + "\n"


@dataclass
class RunSummary:
    load_factor: float
    band_ok: bool
    V_min: float
    V_max: float
    cumulative_control: float
    online_step_s: list


@dataclass
class BenchmarkReport:
    case: str
    offline_step_s: list
    runs: list = field(default_factory=list)  # RunSummary per load factor
    r2: dict = field(default_factory=dict)

    @property
    def offline_mean(self) -> float:
        return float(np.mean(self.offline_step_s)) if self.offline_step_s else float("nan")

    @property
    def online_mean(self) -> float:
        times = [t for r in self.runs for t in r.online_step_s]
        return float(np.mean(times)) if times else float("nan")

    @property
    def speedup(self) -> float:
        return self.offline_mean / self.online_mean if self.runs else float("nan")

    @property
    def all_in_band(self) -> bool:
        return bool(self.runs) and all(r.band_ok for r in self.runs)

    def monotone_control(self, tol=0.0) -> bool:
        runs = sorted(self.runs, key=lambda r: r.load_factor)
        c = [r.cumulative_control for r in runs]
        return all(b >= a - tol for a, b in zip(c, c[1:]))


def timing_table(reports: Sequence[BenchmarkReport]) -> Table:
    """Average compute time per step: rows = method, columns = case."""
    t = Table(["method"] + [r.case for r in reports])
    if reports:
        t.add("full-model MPC [s/step]", *[r.offline_mean for r in reports])
        t.add("online correction [s/step]", *[r.online_mean for r in reports])
        t.add("speedup", *[r.speedup for r in reports])
    return t


def runs_table(report: BenchmarkReport) -> Table:
    t = Table(["load_factor", "final_V_min", "final_V_max", "in_band", "cumulative_control", "mean_step_s"])
    for r in sorted(report.runs, key=lambda r: r.load_factor):
        t.add(r.load_factor, r.V_min, r.V_max, r.band_ok, r.cumulative_control,
              float(np.mean(r.online_step_s)) if r.online_step_s else float("nan"))
    return t


def r2_table(r2: dict) -> Table:
    t = Table(["surrogate", "test_r2"])
    for k in sorted(r2):
        t.add(k, r2[k])
    return t


def schedule_table(schedule, cumulative=False) -> Table:
    """Rows = channels, columns = control instants."""
    t = Table(["channel"] + [fmt(float(x)) for x in schedule.times])
    vals = np.hstack([schedule.svc, schedule.ls, schedule.ltc.astype(float)])
    if cumulative:
        vals = np.cumsum(vals, axis=0)
    for c, lab in enumerate(schedule.labels):
        t.add(lab, *[float(v) for v in vals[:, c]])
    return t


def emit_report(report: BenchmarkReport, out_dir) -> dict:
    """Write the benchmark tables as CSV plus one markdown summary; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    tables = {"timing": timing_table([report]), "runs": runs_table(report), "r2": r2_table(report.r2)}
    for name, tab in tables.items():
        paths[name] = os.path.join(out_dir, f"benchmark_{name}.csv")
        tab.write_csv(paths[name])
    md = [f"# Benchmark: {report.case}", "", "## Compute time", "", tables["timing"].markdown(),
          "## Closed-loop runs", "", tables["runs"].markdown(), "## Surrogate quality", "", tables["r2"].markdown()]
    paths["markdown"] = os.path.join(out_dir, "benchmark.md")
    with open(paths["markdown"], "w") as fh:
        fh.write("\n".join(md))
    return paths
