"""Dense strictly convex QP:  min ½ zᵀHz + cᵀz  s.t.  A z ≤ b,  lb ≤ z ≤ ub.

Solved by the dual active-set method of Goldfarb and Idnani: start from the
unconstrained minimizer and add violated constraints one at a time, so no
feasible starting point is needed and infeasibility is detected exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import solve_triangular


class QpError(ValueError):
    pass


@dataclass
class QpProblem:
    H: np.ndarray
    c: np.ndarray
    A: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None
    lb: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        n = self.H.shape[0]
        self.c = np.asarray(self.c, dtype=float).reshape(n)
        if self.H.shape != (n, n):
            raise QpError(f"H must be square, got {self.H.shape}")
        if not np.allclose(self.H, self.H.T, rtol=1e-10, atol=1e-12):
            raise QpError("H must be symmetric")
        self.H = 0.5 * (self.H + self.H.T)
        try:
            self.L = np.linalg.cholesky(self.H)
        except np.linalg.LinAlgError as exc:
            raise QpError("H is not positive definite") from exc
        self.A = np.zeros((0, n)) if self.A is None else np.atleast_2d(np.asarray(self.A, dtype=float))
        self.b = np.zeros(0) if self.b is None else np.asarray(self.b, dtype=float).reshape(-1)
        if self.A.shape != (len(self.b), n):
            raise QpError(f"A has shape {self.A.shape}, expected ({len(self.b)}, {n})")
        self.lb = np.full(n, -np.inf) if self.lb is None else np.asarray(self.lb, dtype=float).reshape(n)
        self.ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float).reshape(n)
        if np.any(self.lb > self.ub):
            raise QpError("lb > ub")

    @property
    def n(self) -> int:
        return self.H.shape[0]

    @property
    def m(self) -> int:
        return self.A.shape[0]

    def objective(self, z) -> float:
        return float(0.5 * z @ self.H @ z + self.c @ z)

    def constraint_rows(self):
        """All constraints as ``N z >= d`` with their origin labels.

        Order: general rows, then lower bounds, then upper bounds.
        """
        n = self.n
        I = np.eye(n)
        fl, fu = np.isfinite(self.lb), np.isfinite(self.ub)
        N = np.vstack([-self.A, I[fl], -I[fu]])
        d = np.concatenate([-self.b, self.lb[fl], -self.ub[fu]])
        origin = ([("A", i) for i in range(self.m)] + [("lb", i) for i in np.flatnonzero(fl)]
                  + [("ub", i) for i in np.flatnonzero(fu)])
        return N, d, origin


@dataclass
class QpSolution:
    z: np.ndarray
    objective: float
    lam: np.ndarray  # multipliers of A z <= b
    mu_lb: np.ndarray
    mu_ub: np.ndarray
    active: list = field(default_factory=list)
    iterations: int = 0
    status: str = "optimal"

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


def solve_qp(problem: QpProblem, tol: float = 1e-8, max_iter: Optional[int] = None) -> QpSolution:
    p = problem
    n = p.n
    N, d, origin = p.constraint_rows()
    mc = len(d)
    max_iter = max_iter or 20 * (n + mc) + 50
    L = p.L
    Linv = solve_triangular(L, np.eye(n), lower=True)  # L^{-1}

    z = -_chol_solve(L, p.c)
    active: list = []
    u = np.zeros(0)
    it = 0
    # scale for the violation test
    nrm = np.maximum(np.linalg.norm(N, axis=1), 1e-300)

    def factor(act):
        """J = L^{-T} Q and R from the QR of L^{-1} N_A."""
        if not act:
            return Linv.T, np.zeros((0, 0))
        B = Linv @ N[act].T
        Q, R = np.linalg.qr(B, mode="complete")
        return Linv.T @ Q, R[:len(act), :]

    status = "optimal"
    while True:
        s = N @ z - d
        viol = np.where(s < -tol * np.maximum(1.0, np.abs(d)), s / nrm, 0.0)
        for k in active:
            viol[k] = 0.0
        if not np.any(viol < 0):
            break
        pidx = int(np.argmin(viol))  # ties resolve to the lowest index
        npv = N[pidx]
        u_p = 0.0
        while True:
            it += 1
            if it > max_iter:
                status = "max-iter"
                break
            J, R = factor(active)
            q = len(active)
            dvec = J.T @ npv
            J2 = J[:, q:]
            step = J2 @ dvec[q:]
            r = solve_triangular(R, dvec[:q], lower=False) if q else np.zeros(0)
            # partial step bound from dropping an active constraint
            t1, kdrop = np.inf, -1
            for j in range(q):
                if r[j] > 1e-14 and u[j] / r[j] < t1:
                    t1, kdrop = u[j] / r[j], j
            sp = npv @ z - d[pidx]
            denom = step @ npv
            if np.linalg.norm(step) <= 1e-12 * max(1.0, np.linalg.norm(npv)):
                if kdrop < 0:
                    status = "infeasible"
                    break
                u = u - t1 * r
                u_p += t1
                del active[kdrop]
                u = np.delete(u, kdrop)
                continue
            t2 = -sp / denom
            t = min(t1, t2)
            z = z + t * step
            u = u - t * r
            u_p += t
            if t2 <= t1:
                active.append(pidx)
                u = np.append(u, u_p)
                break
            del active[kdrop]
            u = np.delete(u, kdrop)
        if status != "optimal":
            break

    lam_all = np.zeros(mc)
    for k, mult in zip(active, u):
        lam_all[k] = max(mult, 0.0)
    if status == "optimal" and active:
        z, lam_all = _polish(p, N, d, active, z, lam_all)
    lam = np.zeros(p.m)
    mu_lb, mu_ub = np.zeros(n), np.zeros(n)
    for k, (kind, i) in enumerate(origin):
        {"A": lam, "lb": mu_lb, "ub": mu_ub}[kind][i] = lam_all[k]
    if status == "optimal":
        # snap tiny bound violations left by rounding
        z = np.clip(z, p.lb, p.ub)
    return QpSolution(z, p.objective(z), lam, mu_lb, mu_ub, [origin[k] for k in active], it, status)


def _chol_solve(L, v):
    return solve_triangular(L.T, solve_triangular(L, v, lower=True), lower=False)


def _polish(p: QpProblem, N, d, active, z, lam_all):
    """Re-solve the equality-constrained QP on the final active set."""
    n, q = p.n, len(active)
    Na = N[active]
    K = np.block([[p.H, -Na.T], [Na, np.zeros((q, q))]])
    rhs = np.concatenate([-p.c, d[active]])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        return z, lam_all
    z2, l2 = sol[:n], sol[n:]
    if np.all(l2 >= -1e-10) and np.all(np.isfinite(sol)):
        s = N @ z2 - d
        if np.min(s, initial=0.0) >= np.min(N @ z - d, initial=0.0) - 1e-12:
            lam_all = lam_all.copy()
            lam_all[active] = np.maximum(l2, 0.0)
            return z2, lam_all
    return z, lam_all


def kkt_residual(problem: QpProblem, z, multipliers=None) -> float:
    """Max of stationarity, primal violation, dual sign violation and complementarity.

    ``multipliers`` is a QpSolution, a tuple ``(lam, mu_lb, mu_ub)`` or a
    stacked vector of length ``m + 2n``.
    """
    p = problem
    n, m = p.n, p.m
    z = np.asarray(z, dtype=float)
    if multipliers is None:
        lam, mu_lb, mu_ub = np.zeros(m), np.zeros(n), np.zeros(n)
    elif isinstance(multipliers, QpSolution):
        lam, mu_lb, mu_ub = multipliers.lam, multipliers.mu_lb, multipliers.mu_ub
    elif isinstance(multipliers, tuple):
        lam, mu_lb, mu_ub = (np.asarray(v, dtype=float) for v in multipliers)
    else:
        v = np.asarray(multipliers, dtype=float)
        lam, mu_lb, mu_ub = v[:m], v[m:m + n], v[m + n:]
    grad = p.H @ z + p.c + p.A.T @ lam - mu_lb + mu_ub
    res = [np.max(np.abs(grad), initial=0.0)]
    slack = p.A @ z - p.b
    res.append(np.max(slack, initial=0.0))
    fl, fu = np.isfinite(p.lb), np.isfinite(p.ub)
    res.append(np.max(p.lb[fl] - z[fl], initial=0.0))
    res.append(np.max(z[fu] - p.ub[fu], initial=0.0))
    res.append(np.max(-np.concatenate([lam, mu_lb, mu_ub]), initial=0.0))
    res.append(np.max(np.abs(lam * slack), initial=0.0))
    res.append(np.max(np.abs(mu_lb[fl] * (z[fl] - p.lb[fl])), initial=0.0))
    res.append(np.max(np.abs(mu_ub[fu] * (p.ub[fu] - z[fu])), initial=0.0))
    if np.any(mu_lb[~fl] != 0) or np.any(mu_ub[~fu] != 0):
        res.append(np.inf)
    return float(max(res))
