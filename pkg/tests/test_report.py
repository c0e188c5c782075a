import csv

import numpy as np
import pytest

from gridmpc.report import (BenchmarkReport, RunSummary, Table, emit_report, fmt, r2_table, runs_table,
                            schedule_table, timing_table)


def test_fmt_six_significant_digits():
    assert fmt(3.14159265) == "3.14159"
    assert fmt(0.000123456789) == "0.000123457"
    assert fmt(np.float64(2.0)) == "2"
    assert fmt(7) == "7" and fmt(np.int64(-3)) == "-3"
    assert fmt(True) == "yes" and fmt(np.bool_(False)) == "no"
    assert fmt("svc:5") == "svc:5"


def test_empty_timing_table_is_valid(tmp_path):
    t = timing_table([])
    assert t.header == ["method"] and t.rows == []
    t.write_csv(tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().strip() == "method"
    assert t.markdown().splitlines()[1] == "|---|"


def test_row_width_checked():
    with pytest.raises(ValueError):
        Table(["a", "b"]).add(1)


def report():
    r = BenchmarkReport("9bus", [2.0, 4.0], r2={"prediction": 0.99, "avc": 0.97})
    r.runs = [RunSummary(1.1, True, 0.96, 1.02, 0.5, [0.002, 0.004]),
              RunSummary(0.9, True, 0.97, 1.01, 0.2, [0.003])]
    return r


def test_report_metrics():
    r = report()
    assert r.offline_mean == 3.0
    assert r.online_mean == pytest.approx(0.003)
    assert r.speedup == pytest.approx(1000.0)
    assert r.all_in_band and r.monotone_control()
    r.runs.append(RunSummary(1.2, False, 0.9, 1.0, 0.4, [0.001]))
    assert not r.all_in_band and not r.monotone_control() and r.monotone_control(tol=0.1)
    assert np.isnan(BenchmarkReport("x", []).speedup)


def test_tables_layout():
    r = report()
    t = timing_table([r])
    assert [row[0] for row in t.rows] == ["full-model MPC [s/step]", "online correction [s/step]", "speedup"]
    assert t.rows[2][1] == "1000"
    runs = runs_table(r)
    assert [row[0] for row in runs.rows] == ["0.9", "1.1"]  # sorted by load
    assert r2_table(r.r2).rows == [["avc", "0.97"], ["prediction", "0.99"]]


def test_schedule_table(offline9):
    s = offline9.schedule
    t = schedule_table(s)
    assert t.header == ["channel", "4.5", "7.5", "10.5", "13.5", "16.5"]
    assert [row[0] for row in t.rows] == s.labels
    assert t.rows[0][1] == fmt(float(s.svc[0, 0]))
    c = schedule_table(s, cumulative=True)
    assert c.rows[0][-1] == fmt(float(s.svc[:, 0].sum()))


def test_emit_report(tmp_path):
    paths = emit_report(report(), tmp_path / "out")
    assert set(paths) == {"timing", "runs", "r2", "markdown"}
    with open(paths["runs"]) as fh:
        rows = list(csv.reader(fh))
    assert rows[0][0] == "load_factor" and len(rows) == 3
    md = open(paths["markdown"]).read()
    assert md.startswith("# Benchmark: 9bus") and "| speedup | 1000 |" in md
