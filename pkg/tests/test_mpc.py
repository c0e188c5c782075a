import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridmpc.casefile import load_case
from gridmpc.mpc import (AvcConfig, ControlSchedule, HorizonPrediction, MpcConfig, ScheduleFormatError, build_qp,
                         channel_bounds, ltc_decision, ltc_effect_indicator, read_schedule, remaining_room,
                         run_receding_horizon, tracking_gradient, write_schedule)
from gridmpc.qp import solve_qp
from gridmpc.scenarios import get_scenario

AVC = AvcConfig()


@pytest.mark.parametrize("v,expected", [(0.97, 1), (1.0, 0), (1.03, -1), (0.99, 1), (1.01, -1), (0.995, 0)])
def test_ltc_rule_examples(v, expected):
    assert ltc_decision(np.full(60, v), AVC) == expected


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.9, 1.1), min_size=2, max_size=60))
def test_ltc_rule_needs_whole_window(vals):
    v = np.array(vals)
    d = ltc_decision(v, AVC)
    if d == 1:
        assert np.all(v <= 0.99)
    elif d == -1:
        assert np.all(v >= 1.01)
    else:
        assert not (np.all(v <= 0.99) or np.all(v >= 1.01))


def test_avc_lookahead_is_two():
    assert AVC.lookahead == 2
    with pytest.raises(ValueError):
        AvcConfig(V_db=0.0)


def test_ltc_effect_indicator():
    assert ltc_effect_indicator(3, 1, {3}) == 0
    assert ltc_effect_indicator(3, 2, {3}) == 1
    assert ltc_effect_indicator(3, 5, {3}) == 1
    assert all(ltc_effect_indicator(2, i, {3}) == 0 for i in range(7))
    rows = np.array([[0, 1], [0, 0]])
    assert ltc_effect_indicator(0, 2, rows) == 1
    assert ltc_effect_indicator(1, 4, rows) == 0


def test_config_invariants():
    with pytest.raises(ValueError):
        MpcConfig(N=5, N_c=5)
    with pytest.raises(ValueError):
        MpcConfig(T_s=0.7)
    with pytest.raises(ValueError):
        MpcConfig(R=-1.0)
    assert MpcConfig().M == 30
    assert np.allclose(MpcConfig().R_diag(3), 0.8)


def synthetic_prediction(nb=2, M=3, N=3, N_k=2, v=0.97, s=0.1, nch=1):
    V = np.full((N * M, nb), v)
    S = [np.full(((N - j) * M, nb, nch), s) for j in range(N_k)]
    return HorizonPrediction(V, S)


def test_decision_vector_size_9bus(offline9):
    sizes = [s.n_vars for s in offline9.steps]
    assert sizes == [5 * (5 - k) for k in range(5)]


def test_no_benefit_means_no_control():
    cfg = MpcConfig(T_c=0.3, T_s=0.1, N_c=2, N=3)
    pred = synthetic_prediction(v=0.99, s=0.0, nch=2)
    prob, _, _ = build_qp(pred, cfg, np.zeros(2), np.full(2, 0.2), weights=np.array([1.0, 100.0]))
    sol = solve_qp(prob)
    assert sol.ok
    assert np.allclose(sol.z, 0.0, atol=1e-12)


def test_prediction_stacks_cumulative_increments():
    cfg = MpcConfig(T_c=0.3, T_s=0.1, N_c=2, N=3)
    pred = synthetic_prediction(nb=2, M=3, N=3, N_k=2, s=0.1)
    _, G, v0 = build_qp(pred, cfg, np.zeros(1), np.full(1, 0.2))
    V = (v0 + G @ np.array([0.1, 0.05])).reshape(9, 2)
    assert np.allclose(V[:3], 0.97 + 0.01)
    assert np.allclose(V[3:], 0.97 + 0.015)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.9, 0.97), st.floats(0.02, 0.3), st.floats(0.0, 3.0))
def test_one_svc_toy_matches_enumeration(v, s, w):
    cfg = MpcConfig(T_c=0.3, T_s=0.1, N_c=1, N=2, reg=0.0)
    pred = synthetic_prediction(nb=1, M=3, N=2, N_k=1, v=v, s=s)
    prob, G, v0 = build_qp(pred, cfg, np.zeros(1), np.full(1, 0.2), weights=np.array([w]))
    sol = solve_qp(prob)
    grid = np.round(np.arange(0, 0.2001, 0.01), 10)
    feasible = [u for u in grid if np.all(prob.A @ [u] <= prob.b + 1e-12)]
    if not sol.ok:
        assert sol.status == "infeasible" and not feasible
        return
    best = min(feasible, key=lambda u: prob.objective(np.array([u])))
    assert abs(sol.z[0] - best) <= 0.01 + 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.floats(0.0, 0.3))
def test_relaxing_svc_bound_never_hurts(seed, extra):
    rng = np.random.default_rng(seed)
    cfg = MpcConfig(T_c=0.3, T_s=0.1, N_c=2, N=3)
    V = rng.uniform(0.9, 1.0, (9, 3))
    S = [np.abs(rng.normal(0.1, 0.05, ((3 - j) * 3, 3, 2))) for j in range(2)]
    pred = HorizonPrediction(V, S)
    lb = np.zeros(2)
    base = solve_qp(build_qp(pred, cfg, lb, np.full(2, 0.2), slack=True)[0])
    relaxed = solve_qp(build_qp(pred, cfg, lb, np.array([0.2 + extra, 0.2]), slack=True)[0])
    assert relaxed.objective <= base.objective + 1e-9


def test_build_qp_checks_shapes():
    cfg = MpcConfig(T_c=0.3, T_s=0.1, N_c=2, N=3)
    pred = synthetic_prediction()
    pred.S_apply[1] = pred.S_apply[1][:-1]
    with pytest.raises(ValueError):
        build_qp(pred, cfg, np.zeros(1), np.full(1, 0.2))


def test_tracking_gradient_is_the_derivative(rng):
    cfg = MpcConfig()
    V = rng.uniform(0.93, 1.0, (30, 4))
    S = rng.normal(0, 0.1, (30, 4, 3))
    w = np.array([1.0, 1.0, 100.0])
    R = cfg.R_diag(4)

    def J(du):
        Vh = V + S @ du
        return float(np.sum(R * (Vh - cfg.V_ref) ** 2) + w @ du)

    eps = 1e-6
    fd = np.array([(J(eps * e) - J(-eps * e)) / (2 * eps) for e in np.eye(3)])
    assert np.allclose(tracking_gradient(V, S, cfg, w), fd, atol=1e-6)


def test_offline_schedule_grid(offline9):
    s = offline9.schedule
    assert np.allclose(s.times, [4.5, 7.5, 10.5, 13.5, 16.5])
    assert s.labels == ["svc:5", "svc:7", "svc:8", "ls:10", "ls:11", "ltc:1", "ltc:2"]


def test_offline_steps_certified(offline9):
    assert all(s.status == "optimal" for s in offline9.steps)
    assert max(s.kkt for s in offline9.steps) < 1e-8


def test_offline_bounds_respected(offline9, case9):
    s = offline9.schedule
    lb, ub, _ = channel_bounds(case9, MpcConfig())
    inc = np.hstack([s.svc, s.ls])
    assert np.all(inc >= lb - 1e-12) and np.all(inc <= ub + 1e-12)
    assert set(np.unique(s.ltc)) <= {-1, 0, 1}


def test_offline_pattern(offline9):
    s = offline9.schedule
    assert s.svc[0].max() == pytest.approx(0.2)  # saturated support at the first instant
    assert s.svc[-1].sum() < s.svc[0].sum()  # tapering later
    assert np.any(s.ltc == 1)


def test_offline_restores_band(offline9):
    tr = offline9.trajectory
    late = tr.t >= 17.0
    assert tr.V[late].min() >= 0.95 and tr.V[late].max() <= 1.05


def test_ltc_spacing(offline9):
    assert offline9.schedule.spacing_ok()
    nz = offline9.schedule.ltc != 0
    assert not np.any(nz[1:] & nz[:-1])


def test_tap_changes_two_instants_later(offline9, case9):
    s = offline9.schedule
    tr = offline9.trajectory
    ratios = tr.u[:, -len(case9.ltcs):]
    m0 = np.array([d.m for d in case9.ltcs])
    step = np.array([d.tap_step for d in case9.ltcs])
    # expected ratio at each control instant (including the tail instants)
    for j in range(s.n_instants + s.delay):
        t_j = s.time(j)
        if t_j >= tr.t[-1]:
            break
        i = tr.index_of(t_j)
        taken = s.ltc[:max(0, min(j - 1, s.n_instants))].sum(axis=0)  # decisions at k <= j - 2
        assert np.allclose(ratios[i], m0 + step * taken), j
    # and ratios only move at instants
    moves = np.flatnonzero(np.any(np.diff(ratios, axis=0) != 0, axis=1)) + 1
    grid = {tr.index_of(s.time(j)) for j in range(s.n_instants + s.delay) if s.time(j) < tr.t[-1]}
    assert set(moves) <= grid


def test_no_fault_needs_no_control(case9):
    res = run_receding_horizon(case9, get_scenario("none"), MpcConfig())
    s = res.schedule
    assert np.all(s.svc == 0) and np.all(s.ls == 0) and np.all(s.ltc == 0)


def test_scenario_grid_must_match(case9):
    with pytest.raises(ValueError):
        run_receding_horizon(case9, get_scenario("fault5", N_c=4), MpcConfig())


def sample_schedule(case9):
    s = ControlSchedule.empty(case9, 3, 4.5, 3.0)
    s.svc[0] = [0.2, 0.1, 0.0]
    s.svc[1] = [0.05, 0.0, 0.0]
    s.ls[2] = [0.1, 0.0]
    s.ltc[0] = [1, 0]
    s.ltc[2] = [0, -1]
    return s


def test_setting_accumulates_and_delays_taps(case9):
    s = sample_schedule(case9)
    assert np.allclose(s.setting(case9, 1).svc, [0.25, 0.1, 0.0])
    assert np.allclose(s.setting(case9, 1, through=0).svc, [0.2, 0.1, 0.0])
    assert np.array_equal(s.setting(case9, 1).ltc, [0, 0])
    assert np.array_equal(s.setting(case9, 2).ltc, [1, 0])
    assert np.array_equal(s.setting(case9, 4).ltc, [1, -1])
    ctl = s.to_controls(case9)
    assert [t for t, _ in ctl] == [4.5, 7.5, 10.5, 13.5, 16.5]
    assert not ControlSchedule(4.5, 3.0, np.zeros((2, 1)), np.zeros((2, 1)), [[1], [1]]).spacing_ok()


def test_schedule_file_round_trip(case9, tmp_path, rng):
    s = sample_schedule(case9)
    s.grad = rng.normal(size=(3, 5))
    s.v_end = rng.uniform(0.9, 1.1, (3, 11))
    s.bus_ids = [b.id for b in case9.buses]
    path = tmp_path / "schedule.txt"
    write_schedule(s, path)
    r = read_schedule(path)
    for name in ("svc", "ls", "ltc", "grad", "v_end"):
        assert np.array_equal(getattr(r, name), getattr(s, name)), name
    assert r.labels == s.labels and r.bus_ids == s.bus_ids
    assert (r.t_first, r.T_c, r.delay) == (4.5, 3.0, 2)


def test_plain_schedule_round_trip(case9, tmp_path):
    s = sample_schedule(case9)
    write_schedule(s, tmp_path / "s.txt")
    r = read_schedule(tmp_path / "s.txt")
    assert r.grad is None and r.v_end is None
    assert np.array_equal(r.svc, s.svc)


def test_schedule_file_errors(case9, tmp_path):
    p = tmp_path / "s.txt"
    write_schedule(sample_schedule(case9), p)
    text = p.read_text()
    p.write_text(text.replace("gridmpc-schedule 1", "gridmpc-schedule 9"))
    with pytest.raises(ScheduleFormatError, match="version"):
        read_schedule(p)
    p.write_text("hello\n")
    with pytest.raises(ScheduleFormatError):
        read_schedule(p)
    p.write_text(text.replace("instants 3", "instants two"))
    with pytest.raises(ScheduleFormatError, match="corrupt"):
        read_schedule(p)


def test_remaining_room(eq9):
    case = eq9.case
    cv = case.zero_controls()
    room = remaining_room(case, cv)
    assert np.allclose(room[:3], [d.b_max for d in case.svcs])
    assert np.allclose(room[3:], [case.loads[case.load_at(d.bus)].P0 for d in case.ls_actuators])
