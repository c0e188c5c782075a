import time

import numpy as np
import pytest

from gridmpc.casefile import load_case
from gridmpc.mpc import MpcConfig, run_receding_horizon
from gridmpc.powerflow import initialize_equilibrium
from gridmpc.scenarios import get_scenario

FIXTURE_SECONDS = {}
# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def case9():
    return load_case("9bus")


@pytest.fixture(scope="session")
def case39():
    return load_case("39bus")


@pytest.fixture(scope="session")
def eq9(case9):
    return initialize_equilibrium(case9)


@pytest.fixture(scope="session")
def offline9(case9):
    """Nominal offline MPC on the 9-bus fault at the default sampling."""
    start = time.perf_counter()
    res = run_receding_horizon(case9, get_scenario("fault5"), MpcConfig())
    FIXTURE_SECONDS["offline9"] = time.perf_counter() - start
    return res


@pytest.fixture(scope="session")
def fast_design(case9):
    from gridmpc import pipeline as pl

    start = time.perf_counter()
    design = pl.build_design("9bus", "fault5", pl.PROFILES["fast"])
    FIXTURE_SECONDS["fast_design"] = time.perf_counter() - start
    return design


@pytest.fixture(scope="session")
def fast_pipeline(fast_design):
    """Datasets and trained surrogates under the fast profile (a couple of minutes)."""
    from gridmpc import pipeline as pl

    start = time.perf_counter()
    data = pl.make_datasets(fast_design, pl.PROFILES["fast"], seed=0, workers=1)
    models, r2 = pl.train_surrogates(data, pl.PROFILES["fast"], seed=0)
    seconds = time.perf_counter() - start + FIXTURE_SECONDS.get("fast_design", 0.0)
    return {"design": fast_design, "data": data, "models": models, "r2": r2, "seconds": seconds}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
