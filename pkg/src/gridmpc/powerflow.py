"""Newton power flow and consistent DAE initialization."""
from __future__ import annotations

from dataclasses import replace
from typing import NamedTuple

import numpy as np

from .case import PowerSystemCase


class DivergedCaseError(RuntimeError):
    """Power flow failed to converge."""


class Equilibrium(NamedTuple):
    case: PowerSystemCase  # with machine EMFs, Pm and load references resolved
    x: np.ndarray
    y: np.ndarray


def network_injections(Y, th, V):
    """Complex injections ``S = V conj(Y V)`` and their polar derivatives."""
    Vc = V * np.exp(1j * th)
    I = Y @ Vc
    S = Vc * np.conj(I)
    dS_dth = 1j * Vc[:, None] * np.conj(np.diag(I) - Y * Vc[None, :])
    Vn = Vc / V
    dS_dV = Vc[:, None] * np.conj(Y * Vn[None, :]) + np.diag(np.conj(I) * Vn)
    return S, dS_dth, dS_dV


def _pf_admittance(case: PowerSystemCase) -> np.ndarray:
    idx = case.bus_index
    nb = case.n_buses
    Y = np.zeros((nb, nb), dtype=complex)
    for ln in case.lines:
        if not ln.in_service:
            continue
        f, t = idx[ln.from_bus], idx[ln.to_bus]
        ys = 1.0 / complex(ln.r, ln.x)
        Y[f, f] += (ys + 0.5j * ln.b) / ln.tap**2
        Y[t, t] += ys + 0.5j * ln.b
        Y[f, t] -= ys / ln.tap
        Y[t, f] -= ys / ln.tap
    for d in case.ltcs:
        h, l = idx[d.hv_bus], idx[d.lv_bus]
        yt = 1.0 / (1j * d.x)
        Y[h, h] += d.m**2 * yt
        Y[l, l] += yt
        Y[h, l] -= d.m * yt
        Y[l, h] -= d.m * yt
    for i, b in enumerate(case.buses):
        Y[i, i] += 1j * b.shunt_b
    for bus, yf in case.faults:
        Y[idx[bus], idx[bus]] += yf
    return Y


def solve_power_flow(case: PowerSystemCase, tol=1e-10, max_iter=30):
    """Return bus angles (reference-bus datum) and magnitudes.

    The reference machine's bus is the slack; other machine buses are PV.
    Loads follow their steady-state characteristic ``P0 (V/V0)^alpha_s``
    (constant power when ``V0`` is automatic).
    """
    idx = case.bus_index
    nb = case.n_buses
    Y = _pf_admittance(case)
    th = np.array([b.theta for b in case.buses], dtype=float)
    V = np.array([b.V for b in case.buses], dtype=float)
    gens = case.generators
    ref_bus = idx[gens[case.ref_index].bus]
    gen_buses = {idx[g.bus] for g in gens}
    for g in gens:
        V[idx[g.bus]] = g.V_set
    th -= th[ref_bus]
    Psched = np.zeros(nb)
    for g in gens:
        if not g.is_ref:
            Psched[idx[g.bus]] += g.P_set
    svc_b = np.zeros(nb)
    for d in case.svcs:
        svc_b[idx[d.bus]] += d.b0

    pv = [i for i in range(nb) if i != ref_bus]
    pq = [i for i in range(nb) if i not in gen_buses]
    lb = np.array([idx[ld.bus] for ld in case.loads], dtype=int)
    P0 = np.array([ld.P0 for ld in case.loads])
    Q0 = np.array([ld.Q0 for ld in case.loads])
    auto = np.array([ld.V0 <= 0 for ld in case.loads], dtype=bool)
    V0 = np.array([ld.V0 for ld in case.loads])
    a_s = np.array([ld.alpha_s for ld in case.loads])
    b_s = np.array([ld.beta_s for ld in case.loads])

    def mismatch(th, V):
        S, dth, dV = network_injections(Y, th, V)
        vr = np.where(auto, 1.0, V[lb] / np.where(auto, 1.0, V0))
        PL = P0 * vr**a_s
        QL = Q0 * vr**b_s
        dPL = np.where(auto, 0.0, P0 * a_s * vr ** (a_s - 1) / np.where(auto, 1.0, V0))
        dQL = np.where(auto, 0.0, Q0 * b_s * vr ** (b_s - 1) / np.where(auto, 1.0, V0))
        dP = Psched - S.real
        dQ = svc_b * V**2 - S.imag
        np.subtract.at(dP, lb, PL)
        np.subtract.at(dQ, lb, QL)
        JP_th, JQ_th = -dth.real, -dth.imag
        JP_V, JQ_V = -dV.real.copy(), -dV.imag.copy()
        JQ_V[np.arange(nb), np.arange(nb)] += 2 * svc_b * V
        JP_V[lb, lb] -= dPL
        JQ_V[lb, lb] -= dQL
        F = np.concatenate([dP[pv], dQ[pq]])
        J = np.block([[JP_th[np.ix_(pv, pv)], JP_V[np.ix_(pv, pq)]],
                      [JQ_th[np.ix_(pq, pv)], JQ_V[np.ix_(pq, pq)]]])
        return F, J, S

    for it in range(max_iter + 1):
        F, J, S = mismatch(th, V)
        if np.max(np.abs(F), initial=0.0) < tol:
            return th, V, S
        if it == max_iter:
            break
        try:
            step = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError as exc:
            raise DivergedCaseError(f"singular power-flow Jacobian: {exc}") from exc
        th[pv] += step[:len(pv)]
        V[pq] += step[len(pv):]
        if np.any(V <= 0) or not np.all(np.isfinite(V)):
            break
    raise DivergedCaseError(f"power flow did not converge in {max_iter} iterations "
                            f"(mismatch {np.max(np.abs(F)):.3e})")


def initialize_equilibrium(case: PowerSystemCase, tol=1e-10, max_iter=30) -> Equilibrium:
    """Solve the power flow and back-solve machine and load states so f = 0."""
    idx = case.bus_index
    th, V, S = solve_power_flow(case, tol=tol, max_iter=max_iter)
    Vc = V * np.exp(1j * th)

    loads = []
    Sload = np.zeros(case.n_buses, dtype=complex)
    xP, xQ = [], []
    for ld in case.loads:
        i = idx[ld.bus]
        Vr = ld.V0 if ld.V0 > 0 else V[i]
        vr = V[i] / Vr
        PL, QL = ld.P0 * vr**ld.alpha_s, ld.Q0 * vr**ld.beta_s
        Sload[i] += PL + 1j * QL
        xP.append(ld.T_P * (PL - ld.P0 * vr**ld.alpha_t))
        xQ.append(ld.T_Q * (QL - ld.Q0 * vr**ld.beta_t))
        loads.append(replace(ld, V_ref=float(Vr)))
    svc_q = np.zeros(case.n_buses)
    for d in case.svcs:
        svc_q[idx[d.bus]] += d.b0 * V[idx[d.bus]] ** 2

    gens, deltas = [], []
    for g in case.generators:
        i = idx[g.bus]
        Sg = S[i] + Sload[i] - 1j * svc_q[i]
        Ig = np.conj(Sg / Vc[i])
        E = Vc[i] + 1j * g.xd_p * Ig
        gens.append(replace(g, E_p=float(abs(E)), Pm=float(Sg.real)))
        deltas.append(float(np.angle(E)))
    deltas = np.array(deltas)
    shift = deltas[case.ref_index]
    deltas -= shift
    th = th - shift

    new_case = replace(case, generators=tuple(gens), loads=tuple(loads))
    ng = len(gens)
    x = np.concatenate([np.delete(deltas, case.ref_index), np.zeros(ng), xP, xQ])
    y = np.concatenate([th, V])
    return Equilibrium(new_case, x, y)
