import csv

import numpy as np
import pytest

from gridmpc.cli import main
from gridmpc.mpc import read_schedule, write_schedule


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_simulate_without_control(tmp_path, capsys):
    assert main(["simulate", "--no-control", "--fast", "--out-dir", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "trajectory.csv")
    header, data = rows[0], np.array(rows[1:], dtype=float)
    late = data[:, 0] >= 10.0
    assert data[late, header.index("V_5")].max() < 0.95
    assert "min voltage after t = 10 s" in capsys.readouterr().out


def test_offline_fast_schedule(tmp_path, capsys):
    assert main(["offline-mpc", "--fast", "--out-dir", str(tmp_path)]) == 0
    s = read_schedule(tmp_path / "schedule.txt")
    assert s.n_instants == 5 and s.times[0] == 4.5
    assert s.spacing_ok()
    assert "4.5, 7.5, 10.5, 13.5, 16.5 s" in capsys.readouterr().out
    steps = read_csv(tmp_path / "offline_steps.csv")
    assert len(steps) == 6 and all(r[2] == "optimal" for r in steps[1:])
    # same inputs, same schedule file
    other = tmp_path / "again"
    assert main(["offline-mpc", "--fast", "--out-dir", str(other)]) == 0
    assert (other / "schedule.txt").read_bytes() == (tmp_path / "schedule.txt").read_bytes()


def test_validate_sensitivity(tmp_path):
    assert main(["validate-sensitivity", "--out-dir", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "sensitivity_validation.csv")
    assert [r[0] for r in rows[1:]] == ["svc:5", "ls:10", "ltc:1"]
    assert all(r[3] == "yes" for r in rows[1:])


def test_errors_exit_two(tmp_path, capsys):
    assert main(["simulate", "--case", str(tmp_path / "missing.case"), "--out-dir", str(tmp_path)]) == 2
    assert "error" in capsys.readouterr().err
    assert main(["online", "--fast", "--out-dir", str(tmp_path / "empty")]) == 2
    bad = tmp_path / "bad.case"
    bad.write_text("[nonsense]\n")
    assert main(["simulate", "--case", str(bad), "--out-dir", str(tmp_path)]) == 2
    with pytest.raises(SystemExit):
        main(["no-such-stage"])


def test_online_with_trained_models(fast_pipeline, tmp_path, capsys):
    out = tmp_path / "run"
    fast_pipeline["models"].save(out / "models")
    out.mkdir(exist_ok=True)
    write_schedule(fast_pipeline["design"].schedule, out / "schedule.txt")
    assert main(["online", "--fast", "--load-factor", "1.1", "--out-dir", str(out)]) == 0
    corr = read_csv(out / "corrections.csv")
    assert len(corr) == 6
    assert "final V in" in capsys.readouterr().out
