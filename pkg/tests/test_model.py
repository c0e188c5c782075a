import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridmpc.case import (Bus, CaseError, ControlVector, ErLoad, FaultOn, Generator, Line, LineTrip, PowerSystemCase,
                          TapStep, apply_event, scale_loads)
from gridmpc.casefile import load_case
from gridmpc.integrator import IntegratorConfig, simulate, solve_algebraic
from gridmpc.model import ModelDomainError, analytic_jacobians, dae_residuals, model_for
from gridmpc.powerflow import DivergedCaseError, initialize_equilibrium, solve_power_flow
from gridmpc.scenarios import get_scenario


def fd_jacobians(x, y, u, case, eps=1e-6):
    out = []
    for v, which in ((x, 0), (y, 1), (u, 2)):
        Jf = np.zeros((len(x), len(v)))
        Jg = np.zeros((len(y), len(v)))
        for j in range(len(v)):
            args_p = [x.copy(), y.copy(), u.copy()]
            args_m = [x.copy(), y.copy(), u.copy()]
            args_p[which][j] += eps
            args_m[which][j] -= eps
            fp, gp = dae_residuals(*args_p, case)
            fm, gm = dae_residuals(*args_m, case)
            Jf[:, j] = (fp - fm) / (2 * eps)
            Jg[:, j] = (gp - gm) / (2 * eps)
        out.append((Jf, Jg))
    (f_x, g_x), (f_y, g_y), (f_u, g_u) = out
    return f_x, f_y, f_u, g_x, g_y, g_u


def rel_err(A, B):
    return np.max(np.abs(A - B)) / max(np.max(np.abs(B)), 1.0)


def operating_point(eq, rng, spread=0.02):
    case = eq.case
    m = model_for(case)
    x = eq.x + spread * rng.standard_normal(len(eq.x))
    y = eq.y + spread * rng.standard_normal(len(eq.y))
    y[m.nb:] = np.abs(y[m.nb:])
    cv = ControlVector(rng.uniform(0, 0.2, m.ns), rng.uniform(0, 0.05, m.nls), rng.integers(-2, 3, m.nt))
    return x, y, m.u_vector(cv)


@pytest.mark.parametrize("name", ["9bus", "39bus"])
def test_equilibrium_closes_residuals(name):
    eq = initialize_equilibrium(load_case(name))
    f, g = dae_residuals(eq.x, eq.y, eq.case.zero_controls(), eq.case)
    assert np.max(np.abs(f)) < 1e-8
    assert np.max(np.abs(g)) < 1e-8


def test_jacobians_match_finite_differences(eq9, rng):
    for _ in range(3):
        x, y, u = operating_point(eq9, rng)
        J = analytic_jacobians(x, y, u, eq9.case)
        Jfd = fd_jacobians(x, y, u, eq9.case)
        for name, a, b in zip(("f_x", "f_y", "f_u", "g_x", "g_y", "g_u"), J, Jfd):
            assert rel_err(a, b) < 1e-5, name


def test_jacobians_39bus_faulted():
    eq = initialize_equilibrium(load_case("39bus"))
    case = apply_event(eq.case, FaultOn(15))
    x, y, u = operating_point(eq._replace(case=case), np.random.default_rng(7), spread=0.01)
    for name, a, b in zip(("f_x", "f_y", "f_u", "g_x", "g_y", "g_u"), analytic_jacobians(x, y, u, case),
                          fd_jacobians(x, y, u, case)):
        assert rel_err(a, b) < 1e-5, name


def test_controls_never_drive_swing_states(eq9):
    m = model_for(eq9.case)
    f_u = analytic_jacobians(eq9.x, eq9.y, m.u_vector(eq9.case.zero_controls()), eq9.case)[2]
    swing = np.arange(m.sl_omega.stop)  # delta and omega rows
    assert np.all(f_u[swing] == 0)


def test_network_jacobian_follows_topology(eq9):
    case = eq9.case
    m = model_for(case)
    g_y = analytic_jacobians(eq9.x, eq9.y, m.u_vector(case.zero_controls()), case)[4]
    idx = case.bus_index
    linked = {(idx[l.from_bus], idx[l.to_bus]) for l in case.lines if l.in_service}
    linked |= {(idx[t.hv_bus], idx[t.lv_bus]) for t in case.ltcs}
    linked |= {(b, a) for a, b in linked}
    nb = m.nb
    for i in range(nb):
        for j in range(nb):
            if i == j:
                continue
            block = g_y[np.ix_([i, nb + i], [j, nb + j])]
            if (i, j) not in linked:
                assert np.all(block == 0), (i, j)
            else:
                assert np.any(block != 0), (i, j)


def test_recovered_load_draws_base_power(eq9):
    m = model_for(eq9.case)
    assert np.allclose(eq9.x[m.sl_xp], 0, atol=1e-12)
    f, _ = dae_residuals(eq9.x, eq9.y, eq9.case.zero_controls(), eq9.case)
    assert np.allclose(f[m.sl_xp], 0, atol=1e-12)
    P, _ = m.load_powers(eq9.x, eq9.y, m.u_vector(eq9.case.zero_controls()))
    assert np.allclose(P, m.P0, atol=1e-10)


@pytest.mark.parametrize("name", ["9bus", "39bus"])
def test_generation_balances_load_and_losses(name):
    eq = initialize_equilibrium(load_case(name))
    case = eq.case
    m = model_for(case)
    u = m.u_vector(case.zero_controls())
    Pg, _ = m.generator_powers(eq.x, eq.y)
    PL, _ = m.load_powers(eq.x, eq.y, u)
    th, V = eq.y[:m.nb], eq.y[m.nb:]
    Vc = V * np.exp(1j * th)
    idx = case.bus_index
    losses = 0.0
    for ln in case.lines:
        if ln.in_service:
            i_s = (Vc[idx[ln.from_bus]] / ln.tap - Vc[idx[ln.to_bus]]) / complex(ln.r, ln.x)
            losses += abs(i_s) ** 2 * ln.r
    assert abs(Pg.sum() - PL.sum() - losses) < 1e-8


def test_dimension_and_domain_errors(eq9):
    u = eq9.case.zero_controls()
    with pytest.raises(ValueError, match="dimension"):
        dae_residuals(eq9.x[:-1], eq9.y, u, eq9.case)
    y = eq9.y.copy()
    y[model_for(eq9.case).nb + 3] = -0.1
    with pytest.raises(ModelDomainError):
        dae_residuals(eq9.x, y, u, eq9.case)


def test_uninitialized_case_rejected(case9):
    with pytest.raises(ValueError, match="initialize"):
        model_for(case9)


def two_bus():
    return PowerSystemCase("two", (Bus(1, 1.0), Bus(2, 1.0)), (Line(1, 1, 2, 0.0, 0.1),),
                           (Generator(1, 1, 5.0, 1.0, 0.2, 0.0, 1.0, True),), ())


def test_two_bus_no_load_is_flat():
    eq = initialize_equilibrium(two_bus())
    assert np.allclose(eq.y, [0, 0, 1, 1], atol=1e-12)


def test_power_flow_mismatch_9bus(case9):
    th, V, S = solve_power_flow(case9, tol=1e-10)
    eq = initialize_equilibrium(case9)
    _, g = dae_residuals(eq.x, eq.y, eq.case.zero_controls(), eq.case)
    assert np.max(np.abs(g)) < 1e-8
    assert np.allclose(eq.y[eq.case.n_buses:], V, atol=1e-12)


def test_power_flow_divergence_reported(case9):
    heavy = dataclasses.replace(case9, loads=tuple(dataclasses.replace(l, P0=6 * l.P0, Q0=6 * l.Q0)
                                                   for l in case9.loads))
    with pytest.raises(DivergedCaseError):
        initialize_equilibrium(heavy)


@settings(max_examples=10, deadline=None)
@given(st.floats(0.8, 1.2))
def test_scaled_cases_initialize(f):
    eq = initialize_equilibrium(scale_loads(load_case("9bus"), f))
    f_, g = dae_residuals(eq.x, eq.y, eq.case.zero_controls(), eq.case)
    assert max(np.max(np.abs(f_)), np.max(np.abs(g))) < 1e-8


def test_unit_factor_is_identity(case9):
    assert scale_loads(case9, 1.0) == case9
    s = scale_loads(case9, 1.2)
    assert all(b.P0 == 1.2 * a.P0 for a, b in zip(case9.loads, s.loads))


def test_post_fault_point_is_consistent(case9):
    sc = get_scenario("fault5")
    eq = initialize_equilibrium(case9)
    tr = simulate(eq.case, sc.events(eq.case), [], 0.0, 4.5, IntegratorConfig(), eq.x, eq.y)
    m = model_for(tr.case_end)
    x, y, u = tr.final
    y2 = solve_algebraic(x, y, u, m, tol=1e-12)
    _, g = m.residuals(x, y2, u)
    assert np.max(np.abs(g)) < 1e-8
    assert np.max(np.abs(y2 - y)) < 1e-8


def test_line_trip_drops_branch(eq9):
    case = eq9.case
    line = next(l for l in case.lines if {l.from_bus, l.to_bus} == {4, 5})
    Y0 = model_for(case).Ybase
    Y1 = model_for(apply_event(case, LineTrip(line.id))).Ybase
    i, j = case.bus_index[4], case.bus_index[5]
    assert Y0[i, j] != 0 and Y1[i, j] == 0


def test_tap_step_changes_ratio_exactly(eq9):
    c = apply_event(eq9.case, TapStep(1, +1))
    assert c.ltcs[0].m == eq9.case.ltcs[0].m + eq9.case.ltcs[0].tap_step
    assert eq9.case.ltcs[0].m == 1.04  # original untouched


def test_negative_load_rejected():
    with pytest.raises(CaseError):
        ErLoad(5, -1.0, 0.0)
