import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridmpc.qp import QpError, QpProblem, kkt_residual, solve_qp


def random_qp(seed, n=5, m=3, box=True):
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((n, n))
    H = B @ B.T + 0.5 * np.eye(n)
    c = rng.standard_normal(n) * 3
    A = rng.standard_normal((m, n))
    z0 = rng.uniform(-0.5, 0.5, n)  # feasible by construction
    b = A @ z0 + rng.uniform(0, 0.3, m)
    lb, ub = (np.full(n, -1.0), np.full(n, 1.0)) if box else (None, None)
    return QpProblem(H, c, A, b, lb, ub)


def dual_projected_gradient(p: QpProblem, iters=200000):
    """First-order reference: projected gradient ascent on the dual of A z <= b."""
    Hinv = np.linalg.inv(p.H)
    lam = np.zeros(p.m)
    step = 1.0 / np.linalg.eigvalsh(p.A @ Hinv @ p.A.T).max()
    for _ in range(iters):
        z = -Hinv @ (p.c + p.A.T @ lam)
        new = np.maximum(lam + step * (p.A @ z - p.b), 0.0)
        if np.max(np.abs(new - lam)) < 1e-14:
            break
        lam = new
    return -Hinv @ (p.c + p.A.T @ lam)


def test_interior_minimum():
    sol = solve_qp(QpProblem(np.eye(4), np.zeros(4), lb=-np.ones(4), ub=np.ones(4)))
    assert sol.ok
    assert np.array_equal(sol.z, np.zeros(4))


def test_active_upper_row():
    p = QpProblem([[2.0]], [-4.0], A=[[1.0]], b=[1.0])
    sol = solve_qp(p)
    assert sol.z[0] == pytest.approx(1.0, abs=1e-12)
    assert sol.lam[0] == pytest.approx(2.0, abs=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_matches_first_order_reference(seed):
    p = random_qp(seed, box=False)
    sol = solve_qp(p)
    assert sol.ok
    assert np.max(np.abs(sol.z - dual_projected_gradient(p))) < 1e-4


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8), st.integers(0, 6), st.booleans())
def test_optimal_solutions_certify(seed, n, m, box):
    p = random_qp(seed, n, m, box)
    sol = solve_qp(p)
    assert sol.ok
    assert kkt_residual(p, sol.z, sol) < 1e-8


def test_kkt_residual_detects_perturbation():
    p = QpProblem([[2.0]], [-4.0], A=[[1.0]], b=[1.0])
    sol = solve_qp(p)
    assert kkt_residual(p, sol.z + 1e-3, sol) >= 1e-4
    assert kkt_residual(p, sol.z - 1e-3, sol) >= 1e-4


def test_kkt_unconstrained_closed_form(rng):
    B = rng.standard_normal((6, 6))
    H = B @ B.T + np.eye(6)
    c = rng.standard_normal(6)
    p = QpProblem(H, c)
    assert kkt_residual(p, -np.linalg.solve(H, c)) < 1e-10


def test_kkt_accepts_stacked_multipliers():
    p = QpProblem(np.eye(2), [-3.0, 0.0], ub=[1.0, 1.0])
    sol = solve_qp(p)
    stacked = np.concatenate([sol.lam, sol.mu_lb, sol.mu_ub])
    assert kkt_residual(p, sol.z, stacked) == kkt_residual(p, sol.z, sol)
    assert kkt_residual(p, sol.z, (sol.lam, sol.mu_lb, sol.mu_ub)) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_scaling_leaves_argmin(seed, s):
    p = random_qp(seed)
    q = QpProblem(s * p.H, s * p.c, p.A, p.b, p.lb, p.ub)
    assert np.max(np.abs(solve_qp(p).z - solve_qp(q).z)) < 1e-7


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 4), st.floats(0.0, 1.0))
def test_tightening_never_improves(seed, i, cut):
    p = random_qp(seed)
    loose = solve_qp(p)
    ub = p.ub.copy()
    ub[i] = ub[i] - cut * (ub[i] - max(p.lb[i], -1.0)) * 0.5
    tight = solve_qp(QpProblem(p.H, p.c, p.A, p.b, p.lb, ub))
    if tight.ok:
        assert tight.objective >= loose.objective - 1e-9


def test_infeasible_reported():
    p = QpProblem(np.eye(2), np.zeros(2), A=[[1.0, 1.0], [-1.0, -1.0]], b=[-1.0, -1.0])
    sol = solve_qp(p)
    assert sol.status == "infeasible"
    assert not sol.ok


def test_bad_problems_rejected():
    with pytest.raises(QpError, match="positive definite"):
        QpProblem([[1.0, 0.0], [0.0, -1.0]], [0.0, 0.0])
    with pytest.raises(QpError, match="symmetric"):
        QpProblem([[1.0, 0.5], [0.0, 1.0]], [0.0, 0.0])
    with pytest.raises(QpError):
        QpProblem(np.eye(2), np.zeros(2), lb=[1.0, 0.0], ub=[0.0, 0.0])
    with pytest.raises(QpError):
        QpProblem(np.eye(2), np.zeros(2), A=np.ones((2, 3)), b=np.zeros(2))


def test_degenerate_constraints_deterministic():
    # two identical rows active at the optimum
    p = QpProblem(np.eye(2), [-2.0, -2.0], A=[[1.0, 1.0], [1.0, 1.0], [1.0, 0.0]], b=[1.0, 1.0, 0.5])
    a, b = solve_qp(p), solve_qp(p)
    assert a.ok
    assert np.array_equal(a.z, b.z) and a.active == b.active
    assert kkt_residual(p, a.z, a) < 1e-8
    assert np.allclose(a.z, [0.5, 0.5])


def brute_force_grid(p: QpProblem, grid):
    best, arg = np.inf, None
    for v in grid:
        z = np.array([v])
        if np.any(p.A @ z > p.b + 1e-12):
            continue
        f = p.objective(z)
        if f < best:
            best, arg = f, v
    return arg


@settings(max_examples=40, deadline=None)
@given(st.floats(0.9, 0.97), st.floats(0.02, 0.3), st.floats(0.0, 2.0))
def test_scalar_optimum_matches_enumeration(v0, s, w):
    # 30 samples of one bus responding linearly to one control
    g = np.full(30, s)
    v = np.full(30, v0)
    H = np.array([[2 * g @ g + 1e-9]])
    c = np.array([2 * g @ (v - 1.0) + w])
    p = QpProblem(H, c, A=[[-s]], b=[v0 - 0.95], lb=[0.0], ub=[0.2])
    grid = np.round(np.arange(0, 0.2001, 0.01), 10)
    sol = solve_qp(p)
    if not sol.ok:  # band out of reach within the box
        assert sol.status == "infeasible"
        assert brute_force_grid(p, grid) is None
        return
    assert abs(sol.z[0] - brute_force_grid(p, grid)) <= 0.01 + 1e-12
