"""Implicit-trapezoidal DAE simulation with discrete events.

The simulation records samples every ``T_s`` and, when asked, keeps the
Jacobians of every converged point so trajectory sensitivities can be
propagated afterwards without re-linearizing.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .case import FaultOff, FaultOn, PowerSystemCase, apply_event
from .model import DaeModel, ModelDomainError, model_for
from .powerflow import initialize_equilibrium


class CollapseError(RuntimeError):
    """Newton failed: reported as voltage instability at time ``t``."""

    def __init__(self, msg, t=None):
        super().__init__(msg if t is None else f"t={t:.4f} s: {msg}")
        self.t = t


@dataclass
class IntegratorConfig:
    T_s: float = 0.1
    substeps: int = 1  # internal steps per sample
    tol: float = 1e-10
    max_iter: int = 20
    archive: bool = False

    def __post_init__(self):
        if self.T_s <= 0 or self.tol <= 0 or self.substeps < 1:
            raise ValueError("T_s, tol must be positive and substeps >= 1")

    @property
    def h(self) -> float:
        return self.T_s / self.substeps


@dataclass
class Node:
    """One converged point of the simulation.

    ``kind`` is ``"init"``, ``"step"`` (trapezoidal step of length ``h``
    from the previous node) or ``"jump"`` (algebraic re-solve after a
    discrete change at the same instant).
    """
    t: float
    kind: str
    h: float
    jac: tuple


@dataclass
class TrajectorySegment:
    j: int
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    V: np.ndarray
    nodes: Optional[list] = None


@dataclass
class Trajectory:
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    u: np.ndarray
    nb: int
    T_s: float
    t0: float
    final: tuple  # (x, y, u) at the end time, before any change scheduled there
    case_end: PowerSystemCase
    nodes: list = field(default_factory=list)
    sample_nodes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def V(self) -> np.ndarray:
        return self.y[:, self.nb:]

    def index_of(self, t: float) -> int:
        i = int(round((t - self.t0) / self.T_s))
        if i < 0 or i >= len(self.t) or abs(self.t[i] - t) > 1e-6:
            raise IndexError(f"t={t} not on the sample grid of this trajectory")
        return i

    def window(self, t_start: float, n: int) -> slice:
        i = self.index_of(t_start)
        if i + n > len(self.t):
            raise IndexError(f"window of {n} samples from t={t_start} exceeds trajectory")
        return slice(i, i + n)

    def segment(self, k: int, t_first: float, T_c: float) -> TrajectorySegment:
        M = int(round(T_c / self.T_s))
        sl = self.window(t_first + k * T_c, M)
        nodes = None
        if self.nodes:
            nodes = self.nodes[self.sample_nodes[sl.start]:self.sample_nodes[sl.stop - 1] + 1]
        return TrajectorySegment(k, self.t[sl], self.x[sl], self.y[sl], self.V[sl], nodes)

    def segments(self, t_first: float, T_c: float, ks: Sequence[int]) -> list:
        return [self.segment(k, t_first, T_c) for k in ks]


def _damping(V, dV, keep=0.5):
    """Largest step fraction (<= 1) that keeps every voltage above ``keep * V``."""
    shrink = dV < -(1 - keep) * V
    if not np.any(shrink):
        return 1.0
    return float(np.min(-(1 - keep) * V[shrink] / dV[shrink]))


def solve_algebraic(x, y_guess, u, model: DaeModel, tol=1e-10, max_iter=20, t=None, return_iters=False):
    """Newton solve of ``g(x, y, u) = 0`` for ``y`` with ``x`` frozen."""
    y = np.array(y_guess, dtype=float)
    for it in range(max_iter + 1):
        try:
            _, g = model.residuals(x, y, u)
        except ModelDomainError as exc:
            raise CollapseError(f"algebraic solve left the voltage domain ({exc})", t) from exc
        if np.max(np.abs(g)) < tol:
            return (y, it) if return_iters else y
        if it == max_iter:
            break
        g_y = model.jacobians(x, y, u)[4]
        try:
            dy = np.linalg.solve(g_y, -g)
        except np.linalg.LinAlgError as exc:
            raise CollapseError("singular network Jacobian", t) from exc
        y = y + _damping(y[model.nb:], dy[model.nb:]) * dy
        if not np.all(np.isfinite(y)):
            break
    raise CollapseError(f"algebraic equations did not converge (|g|={np.max(np.abs(g)):.2e})", t)


def step_trapezoidal(x_n, y_n, u, model: DaeModel, h, config: IntegratorConfig, f_n=None, t=None,
                     return_jac=False):
    """One implicit-trapezoidal step; returns ``(x_{n+1}, y_{n+1})``."""
    nx = model.nx
    if f_n is None:
        f_n, _ = model.residuals(x_n, y_n, u)
    x, y = np.array(x_n, dtype=float), np.array(y_n, dtype=float)
    I = np.eye(nx)
    for it in range(config.max_iter + 1):
        try:
            f, g = model.residuals(x, y, u)
        except ModelDomainError as exc:
            raise CollapseError(f"step left the voltage domain ({exc})", t) from exc
        F = np.concatenate([x - x_n - 0.5 * h * (f_n + f), g])
        res = np.max(np.abs(F))
        jac = None
        if res < config.tol:
            if return_jac:
                jac = model.jacobians(x, y, u)
            return x, y, f, jac
        if it == config.max_iter or not np.isfinite(res):
            break
        f_x, f_y, _, g_x, g_y, _ = model.jacobians(x, y, u)
        J = np.block([[I - 0.5 * h * f_x, -0.5 * h * f_y], [g_x, g_y]])
        try:
            dz = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError as exc:
            raise CollapseError("singular step Jacobian", t) from exc
        a = _damping(y[model.nb:], dz[nx + model.nb:])
        x = x + a * dz[:nx]
        y = y + a * dz[nx:]
    raise CollapseError(f"trapezoidal step did not converge (residual {res:.2e})", t)


def _bucket(items, t0, h, n_steps, what):
    out = {}
    for t, item in items:
        n = int(round((t - t0) / h))
        if n < 0 or n >= n_steps:
            continue
        out.setdefault(n, []).append(item)
    return out


def simulate(case: PowerSystemCase, events=(), controls=(), t0=0.0, t1=10.0,
             config: Optional[IntegratorConfig] = None, x0=None, y0=None) -> Trajectory:
    """Simulate from ``t0`` to ``t1``.

    ``events`` is a sequence of ``(time, event)``; ``controls`` a sequence of
    ``(time, ControlVector)`` setting changes held until the next change.
    Changes are snapped to the internal step grid; those at ``t1`` are left
    for the next run. When ``x0``/``y0`` are omitted the case is initialized
    at equilibrium.
    """
    config = config or IntegratorConfig()
    if t1 <= t0:
        raise ValueError("t1 must exceed t0")
    if x0 is None or y0 is None:
        eq = initialize_equilibrium(case)
        case, x0, y0 = eq.case, eq.x, eq.y
    h = config.h
    n_steps = int(round((t1 - t0) / h))
    ev = _bucket(sorted(events, key=lambda e: e[0]), t0, h, n_steps, "event")
    controls = sorted(controls, key=lambda c: c[0])
    ctl = _bucket(controls, t0, h, n_steps, "control")
    cv = case.zero_controls()
    for t, c in controls:
        if t < t0 - 1e-9:
            cv = c
    model = model_for(case)
    u = model.u_vector(cv)
    x, y = np.array(x0, dtype=float), np.array(y0, dtype=float)

    ts, xs, ys, us, nodes, sample_nodes = [], [], [], [], [], []
    archive = config.archive

    pre_fault = {}

    def jump(n, x, y):
        nonlocal case, model, u
        t = t0 + n * h
        changed = False
        guess = y
        for e in ev.get(n, ()):
            if isinstance(e, FaultOn):
                pre_fault[e.bus] = y.copy()
            elif isinstance(e, FaultOff) and e.bus in pre_fault:
                # the faulted voltages sit near a spurious low-voltage root
                guess = pre_fault.pop(e.bus)
            case = apply_event(case, e)
            changed = True
        if changed:
            model = model_for(case)
        if n in ctl:
            u = model.u_vector(ctl[n][-1])
            changed = True
        if changed:
            y = solve_algebraic(x, guess, u, model, config.tol, config.max_iter, t=t)
            if archive:
                nodes.append(Node(t, "jump", 0.0, model.jacobians(x, y, u)))
        return y

    if archive:
        nodes.append(Node(t0, "init", 0.0, model.jacobians(x, y, u)))
    y = jump(0, x, y)
    f_prev = None
    for n in range(n_steps + 1):
        if n > 0:
            t = t0 + n * h
            try:
                x, y, f_prev, jac = step_trapezoidal(x, y, u, model, h, config, f_prev, t=t, return_jac=archive)
                if archive:
                    nodes.append(Node(t, "step", h, jac))
            except CollapseError:
                # one retry with two half steps
                xm, ym, fm, jm = step_trapezoidal(x, y, u, model, h / 2, config, f_prev, t=t - h / 2,
                                                  return_jac=archive)
                x, y, f_prev, jac = step_trapezoidal(xm, ym, u, model, h / 2, config, fm, t=t,
                                                     return_jac=archive)
                if archive:
                    nodes.append(Node(t - h / 2, "step", h / 2, jm))
                    nodes.append(Node(t, "step", h / 2, jac))
            if n == n_steps:
                break
            y_new = jump(n, x, y)
            if y_new is not y:
                y = y_new
                f_prev = None
        if n % config.substeps == 0:
            ts.append(t0 + n * h)
            xs.append(x.copy())
            ys.append(y.copy())
            us.append(u.copy())
            sample_nodes.append(len(nodes) - 1)
    return Trajectory(np.array(ts), np.array(xs), np.array(ys), np.array(us), model.nb, config.T_s, t0,
                      (x.copy(), y.copy(), u.copy()), case, nodes, np.array(sample_nodes, dtype=int))


def write_trajectory_csv(traj: Trajectory, path, bus_ids, state_names=None):
    """One row per sample: ``t``, then ``V_<bus>`` per bus, then states."""
    nx = traj.x.shape[1]
    state_names = state_names or [f"x{i}" for i in range(nx)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"V_{b}" for b in bus_ids] + list(state_names))
        for i in range(len(traj.t)):
            w.writerow([f"{traj.t[i]:.6g}"] + [f"{v:.10g}" for v in traj.V[i]] + [f"{v:.10g}" for v in traj.x[i]])


def state_names(model: DaeModel):
    case = model.case
    names = [f"delta_g{case.generators[i].id}" for i in model.nonref]
    names += [f"omega_g{g.id}" for g in case.generators]
    names += [f"xP_{ld.bus}" for ld in case.loads] + [f"xQ_{ld.bus}" for ld in case.loads]
    return names
