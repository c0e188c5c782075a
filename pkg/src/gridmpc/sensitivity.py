"""Trajectory sensitivities of bus voltages to control inputs.

Controls are treated as states with zero dynamics: perturbing a control
at time ``t_a`` is a perturbation of those extra states. Propagation runs
the variational equations with the same trapezoidal discretization as the
simulator, re-using the Jacobians archived along the nominal run.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .case import ControlVector, PowerSystemCase
from .integrator import CollapseError, IntegratorConfig, Trajectory, simulate
from .model import DaeModel, model_for


@dataclass
class SensitivityTensor:
    """``S[i, b, c]``: dV_b / du_c at sample ``t[i]``."""
    t: np.ndarray
    S: np.ndarray
    labels: list

    def __post_init__(self):
        if self.S.ndim != 3 or self.S.shape[0] != len(self.t) or self.S.shape[2] != len(self.labels):
            raise ValueError(f"inconsistent tensor shape {self.S.shape} for {len(self.t)} samples, "
                             f"{len(self.labels)} channels")

    def channel(self, label) -> np.ndarray:
        return self.S[:, :, self.labels.index(label)]

    def select(self, labels) -> "SensitivityTensor":
        cols = [self.labels.index(l) for l in labels]
        return SensitivityTensor(self.t, self.S[:, :, cols], list(labels))


def channel_columns(case: PowerSystemCase, channels: Optional[Sequence] = None) -> tuple:
    """Map labels (``svc:5``, ``ls:10``, ``ltc:1``) or u indices to u columns."""
    labels = case.channel_labels()
    if channels is None:
        return list(range(len(labels))), labels
    cols = []
    for ch in channels:
        if isinstance(ch, (int, np.integer)):
            if not 0 <= ch < len(labels):
                raise ValueError(f"channel index {ch} out of range")
            cols.append(int(ch))
        else:
            if ch not in labels:
                raise ValueError(f"unknown control channel {ch!r}; available: {labels}")
            cols.append(labels.index(ch))
    return cols, [labels[c] for c in cols]


class AugmentedModel:
    """A DAE model whose selected control channels are appended to the state.

    ``x̄ = [x; u_sel]`` with zero dynamics for ``u_sel``; the remaining
    channels stay inputs.
    """

    def __init__(self, model: DaeModel, cols):
        self.base = model
        self.cols = np.asarray(cols, dtype=int)
        self.nb, self.ny, self.nu = model.nb, model.ny, model.nu
        self.nx0 = model.nx
        self.nx = model.nx + len(self.cols)

    def split(self, xbar, u):
        u = np.array(u, dtype=float)
        u[self.cols] = xbar[self.nx0:]
        return xbar[:self.nx0], u

    def residuals(self, xbar, y, u):
        x, uu = self.split(np.asarray(xbar, dtype=float), u)
        f, g = self.base.residuals(x, y, uu)
        return np.concatenate([f, np.zeros(len(self.cols))]), g

    def jacobians(self, xbar, y, u):
        x, uu = self.split(np.asarray(xbar, dtype=float), u)
        f_x, f_y, f_u, g_x, g_y, g_u = self.base.jacobians(x, y, uu)
        nc = len(self.cols)
        fbx = np.zeros((self.nx, self.nx))
        fbx[:self.nx0, :self.nx0] = f_x
        fbx[:self.nx0, self.nx0:] = f_u[:, self.cols]
        fby = np.vstack([f_y, np.zeros((nc, self.ny))])
        fbu = np.vstack([f_u, np.zeros((nc, self.nu))])
        fbu[:, self.cols] = 0.0
        gbx = np.hstack([g_x, g_u[:, self.cols]])
        gbu = g_u.copy()
        gbu[:, self.cols] = 0.0
        return fbx, fby, fbu, gbx, g_y, gbu


def augment_controls(case: PowerSystemCase, channels=None) -> AugmentedModel:
    cols, _ = channel_columns(case, channels)
    return AugmentedModel(model_for(case), cols)


def propagate_sensitivities(traj: Trajectory, channels=None, t_a: Optional[float] = None,
                            n_samples: Optional[int] = None, case: Optional[PowerSystemCase] = None,
                            cols=None, labels=None) -> SensitivityTensor:
    """Voltage sensitivities to controls changed at ``t_a``.

    The perturbation is held from ``t_a`` on. ``channels`` are channel labels
    or u indices of ``case`` (defaults to the trajectory's final case); raw
    ``cols``/``labels`` may be passed instead for non-grid models.
    """
    if not traj.nodes:
        raise ValueError("trajectory has no Jacobian archive; simulate with archive=True")
    if cols is None:
        cols, labels = channel_columns(case or traj.case_end, channels)
    cols = np.asarray(cols, dtype=int)
    labels = list(labels) if labels is not None else [str(c) for c in cols]
    t_a = traj.t[0] if t_a is None else t_a
    i0 = traj.index_of(t_a)
    n_samples = len(traj.t) - i0 if n_samples is None else n_samples
    if i0 + n_samples > len(traj.t):
        raise IndexError("sensitivity window exceeds trajectory")
    nb = traj.nb
    nodes = traj.nodes
    n_a = traj.sample_nodes[i0]
    n_last = traj.sample_nodes[i0 + n_samples - 1]
    want = {int(traj.sample_nodes[i0 + s]): s for s in range(n_samples)}

    f_x, f_y, f_u, g_x, g_y, g_u = nodes[n_a].jac
    nx = f_x.shape[0]
    xu = np.zeros((nx, len(cols)))
    try:
        yu = -np.linalg.solve(g_y, g_u[:, cols])
    except np.linalg.LinAlgError as exc:
        raise CollapseError("singular g_y at control application", nodes[n_a].t) from exc
    out = np.zeros((n_samples, traj.y.shape[1] - nb, len(cols)))
    if n_a in want:
        out[want[n_a]] = yu[nb:]
    I = np.eye(nx)
    prev = nodes[n_a].jac
    for n in range(n_a + 1, n_last + 1):
        node = nodes[n]
        f_x, f_y, f_u, g_x, g_y, g_u = node.jac
        try:
            if node.kind == "step":
                h = node.h
                pf_x, pf_y, pf_u = prev[0], prev[1], prev[2]
                rhs_x = xu + 0.5 * h * (pf_x @ xu + pf_y @ yu + pf_u[:, cols] + f_u[:, cols])
                J = np.block([[I - 0.5 * h * f_x, -0.5 * h * f_y], [g_x, g_y]])
                z = np.linalg.solve(J, np.vstack([rhs_x, -g_u[:, cols]]))
                xu, yu = z[:nx], z[nx:]
            else:  # states continuous across a jump
                yu = -np.linalg.solve(g_y, g_x @ xu + g_u[:, cols])
        except np.linalg.LinAlgError as exc:
            raise CollapseError("singular Jacobian during sensitivity propagation", node.t) from exc
        prev = node.jac
        if n in want:
            out[want[n]] = yu[nb:]
    return SensitivityTensor(traj.t[i0:i0 + n_samples].copy(), out, labels)


def predict_linear(V_nom, S, du) -> np.ndarray:
    """``V̂ = V̄ + S·Δu`` per sample; ``S`` is a tensor or an array ``(n, N_b, n_ch)``."""
    S = S.S if isinstance(S, SensitivityTensor) else np.asarray(S)
    V_nom = np.asarray(V_nom, dtype=float)
    du = np.asarray(du, dtype=float)
    if S.shape[:2] != V_nom.shape or S.shape[2] != du.shape[0]:
        raise ValueError(f"shape mismatch: V {V_nom.shape}, S {S.shape}, du {du.shape}")
    return V_nom + S @ du


def perturb_controls(case: PowerSystemCase, controls, col: int, amount: float, t_a: float, tol=1e-9):
    """Add ``amount`` (in u units) to channel ``col`` from ``t_a`` on."""
    model = model_for(case)
    ns, nls = model.ns, model.nls
    controls = sorted(controls, key=lambda c: c[0])

    def bump(cv: ControlVector):
        svc, ls, ltc = cv.svc.copy(), cv.ls.copy(), cv.ltc.copy()
        if col < ns:
            svc[col] += amount
        elif col < ns + nls:
            ls[col - ns] += amount
        else:
            ltc[col - ns - nls] += amount / model.t_step[col - ns - nls]
        return ControlVector(svc, ls, ltc)

    current = case.zero_controls()
    out, placed = [], False
    for t, cv in controls:
        if t < t_a - tol:
            current = cv
            out.append((t, cv))
        else:
            if not placed and t > t_a + tol:
                out.append((t_a, bump(current)))
            placed = True
            out.append((t, bump(cv)))
    if not placed:
        out.append((t_a, bump(current)))
    return out


def finite_difference_oracle(case: PowerSystemCase, events, controls, channel, eps: float, t_a: float,
                             n_samples: int, t0=0.0, config: Optional[IntegratorConfig] = None,
                             x0=None, y0=None) -> SensitivityTensor:
    """Central difference of two full nonlinear runs with the channel at ``±eps``."""
    from .powerflow import initialize_equilibrium
    config = config or IntegratorConfig()
    if x0 is None:
        eq = initialize_equilibrium(case)
        case, x0, y0 = eq.case, eq.x, eq.y
    (col,), (label,) = channel_columns(case, [channel])
    t1 = t_a + n_samples * config.T_s
    runs = []
    for sgn in (1.0, -1.0):
        ctl = perturb_controls(case, controls, col, sgn * eps, t_a)
        tr = simulate(case, events, ctl, t0, t1 + config.T_s, IntegratorConfig(
            T_s=config.T_s, substeps=config.substeps, tol=config.tol, max_iter=config.max_iter), x0, y0)
        sl = tr.window(t_a, n_samples)
        runs.append(tr.V[sl])
        t = tr.t[sl].copy()
    S = (runs[0] - runs[1]) / (2 * eps)
    return SensitivityTensor(t, S[:, :, None], [label])


def write_sensitivity_csv(tensor: SensitivityTensor, path, bus_ids):
    """Rows ``t, bus, channel, value``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "bus", "channel", "value"])
        for i, t in enumerate(tensor.t):
            for b, bus in enumerate(bus_ids):
                for c, lab in enumerate(tensor.labels):
                    w.writerow([f"{t:.6g}", bus, lab, f"{tensor.S[i, b, c]:.10g}"])


def sup_relative_error(S, S_ref, floor=1e-4) -> float:
    """``‖S - S_ref‖∞ / max(‖S_ref‖∞, floor)``."""
    S, S_ref = np.asarray(S), np.asarray(S_ref)
    return float(np.max(np.abs(S - S_ref)) / max(np.max(np.abs(S_ref)), floor))


def validate_channels(case: PowerSystemCase, events, controls, channels, t_a: float, n_samples: int,
                      eps=1e-4, config: Optional[IntegratorConfig] = None, x0=None, y0=None) -> list:
    """Propagated vs finite-difference sensitivities per channel.

    Returns rows ``(label, sup relative error, max |S_ref|, seconds)``.
    """
    config = config or IntegratorConfig()
    if x0 is None:
        from .powerflow import initialize_equilibrium
        eq = initialize_equilibrium(case)
        case, x0, y0 = eq.case, eq.x, eq.y
    start = time.perf_counter()
    cfg = IntegratorConfig(T_s=config.T_s, substeps=config.substeps, tol=config.tol, max_iter=config.max_iter,
                           archive=True)
    tr = simulate(case, events, controls, 0.0, t_a + (n_samples + 1) * config.T_s, cfg, x0, y0)
    S = propagate_sensitivities(tr, channels, t_a, n_samples, case)
    t_prop = time.perf_counter() - start
    rows = []
    for ch in S.labels:
        ref = finite_difference_oracle(case, events, controls, ch, eps, t_a, n_samples, config=config, x0=x0, y0=y0)
        rows.append((ch, sup_relative_error(S.channel(ch), ref.S[:, :, 0]), float(np.max(np.abs(ref.S))), t_prop))
    return rows
