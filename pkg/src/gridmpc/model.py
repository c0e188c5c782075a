"""DAE right-hand sides ``f``, ``g`` and their analytic Jacobians.

Variable layout
---------------
x = [delta (non-reference machines), omega (all machines), x_P (loads), x_Q (loads)]
y = [theta (all buses), V (all buses)]
u = [b_svc (SVCs), shed (LS actuators), m (LTC ratios)]

Angles are measured from the reference machine's internal angle, which is
held at zero.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from .case import ControlVector, PowerSystemCase


class ModelDomainError(ValueError):
    """Non-positive bus voltage handed to the model."""


class DaeModel:
    def __init__(self, case: PowerSystemCase):
        if not case.initialized:
            raise ValueError("case has no machine EMFs / load references; run initialize_equilibrium")
        self.case = case
        idx = case.bus_index
        self.nb = nb = case.n_buses
        gens = case.generators
        self.ng = ng = len(gens)
        self.ref = case.ref_index
        self.nonref = np.array([i for i in range(ng) if i != self.ref], dtype=int)
        self.gbus = np.array([idx[g.bus] for g in gens], dtype=int)
        self.H = np.array([g.H for g in gens])
        self.D = np.array([g.D for g in gens])
        self.xd = np.array([g.xd_p for g in gens])
        self.E = np.array([g.E_p for g in gens])
        self.Pm = np.array([g.Pm for g in gens])
        self.ws = 2 * np.pi * case.freq

        loads = case.loads
        self.nl = nl = len(loads)
        self.lbus = np.array([idx[ld.bus] for ld in loads], dtype=int)
        self.P0 = np.array([ld.P0 for ld in loads])
        self.Q0 = np.array([ld.Q0 for ld in loads])
        self.TP = np.array([ld.T_P for ld in loads])
        self.TQ = np.array([ld.T_Q for ld in loads])
        self.a_s = np.array([ld.alpha_s for ld in loads])
        self.a_t = np.array([ld.alpha_t for ld in loads])
        self.b_s = np.array([ld.beta_s for ld in loads])
        self.b_t = np.array([ld.beta_t for ld in loads])
        self.Vr = np.array([ld.V_ref for ld in loads])

        self.ns = len(case.svcs)
        self.sbus = np.array([idx[d.bus] for d in case.svcs], dtype=int)
        self.nls = len(case.ls_actuators)
        self.ls_load = np.array([case.load_at(d.bus) for d in case.ls_actuators], dtype=int)
        self.ls_ratio = np.array([self.Q0[j] / self.P0[j] if self.P0[j] > 0 else 0.0 for j in self.ls_load])
        self.nt = len(case.ltcs)
        self.t_hv = np.array([idx[d.hv_bus] for d in case.ltcs], dtype=int)
        self.t_lv = np.array([idx[d.lv_bus] for d in case.ltcs], dtype=int)
        self.t_y = np.array([1.0 / (1j * d.x) for d in case.ltcs], dtype=complex)
        self.t_m0 = np.array([d.m for d in case.ltcs])
        self.t_step = np.array([d.tap_step for d in case.ltcs])

        self.nx = (ng - 1) + ng + 2 * nl
        self.ny = 2 * nb
        self.nu = self.ns + self.nls + self.nt
        self.sl_delta = slice(0, ng - 1)
        self.sl_omega = slice(ng - 1, 2 * ng - 1)
        self.sl_xp = slice(2 * ng - 1, 2 * ng - 1 + nl)
        self.sl_xq = slice(2 * ng - 1 + nl, self.nx)
        self.sl_svc = slice(0, self.ns)
        self.sl_ls = slice(self.ns, self.ns + self.nls)
        self.sl_ltc = slice(self.ns + self.nls, self.nu)
        self.Ybase = self._base_admittance()

    # -- network -----------------------------------------------------------
    def _base_admittance(self) -> np.ndarray:
        case, idx = self.case, self.case.bus_index
        Y = np.zeros((self.nb, self.nb), dtype=complex)
        for ln in case.lines:
            if not ln.in_service:
                continue
            f, t = idx[ln.from_bus], idx[ln.to_bus]
            ys = 1.0 / complex(ln.r, ln.x)
            tau = ln.tap
            Y[f, f] += (ys + 0.5j * ln.b) / tau**2
            Y[t, t] += ys + 0.5j * ln.b
            Y[f, t] -= ys / tau
            Y[t, f] -= ys / tau
        for i, b in enumerate(case.buses):
            Y[i, i] += 1j * b.shunt_b
        for bus, yf in case.faults:
            Y[idx[bus], idx[bus]] += yf
        return Y

    def admittance(self, m) -> np.ndarray:
        Y = self.Ybase.copy()
        h, l, y = self.t_hv, self.t_lv, self.t_y
        np.add.at(Y, (h, h), m**2 * y)
        np.add.at(Y, (l, l), y)
        np.add.at(Y, (h, l), -m * y)
        np.add.at(Y, (l, h), -m * y)
        return Y

    # -- controls ------------------------------------------------------------
    def u_vector(self, cv: ControlVector) -> np.ndarray:
        m = np.clip(self.t_m0 + np.asarray(cv.ltc) * self.t_step,
                    [d.m_min for d in self.case.ltcs], [d.m_max for d in self.case.ltcs]) if self.nt else np.zeros(0)
        return np.concatenate([cv.svc, cv.ls, m])

    def _shed(self, u):
        """Per-load shed of (P0, Q0) from the LS part of ``u``."""
        dP = np.zeros(self.nl)
        np.add.at(dP, self.ls_load, u[self.sl_ls])
        dQ = np.zeros(self.nl)
        np.add.at(dQ, self.ls_load, u[self.sl_ls] * self.ls_ratio)
        return dP, dQ

    def _unpack(self, x, y, u):
        x, y, u = (np.asarray(v, dtype=float) for v in (x, y, u))
        if x.shape != (self.nx,) or y.shape != (self.ny,) or u.shape != (self.nu,):
            raise ValueError(f"dimension mismatch: x{x.shape} y{y.shape} u{u.shape}, "
                             f"expected ({self.nx},) ({self.ny},) ({self.nu},)")
        V = y[self.nb:]
        if np.any(V <= 0) or not np.all(np.isfinite(V)):
            raise ModelDomainError("bus voltages must be strictly positive")
        return x, y, u

    def _parts(self, x, y, u):
        nb = self.nb
        delta = np.zeros(self.ng)
        delta[self.nonref] = x[self.sl_delta]
        omega = x[self.sl_omega]
        th, V = y[:nb], y[nb:]
        Vc = V * np.exp(1j * th)
        m = u[self.sl_ltc]
        Y = self.admittance(m)
        I = Y @ Vc
        S = Vc * np.conj(I)
        dP, dQ = self._shed(u)
        return delta, omega, th, V, Vc, Y, I, S, dP, dQ, m

    # -- residuals -----------------------------------------------------------
    def residuals(self, x, y, u):
        x, y, u = self._unpack(x, y, u)
        delta, omega, th, V, Vc, Y, I, S, dP, dQ, m = self._parts(x, y, u)
        gb, lb = self.gbus, self.lbus
        ang = delta - th[gb]
        Vg = V[gb]
        Pg = self.E * Vg * np.sin(ang) / self.xd
        Qg = (self.E * Vg * np.cos(ang) - Vg**2) / self.xd

        xP, xQ = x[self.sl_xp], x[self.sl_xq]
        vr = V[lb] / self.Vr
        P0e, Q0e = self.P0 - dP, self.Q0 - dQ
        PL = xP / self.TP + P0e * vr**self.a_t
        QL = xQ / self.TQ + Q0e * vr**self.b_t

        f = np.empty(self.nx)
        f[self.sl_delta] = self.ws * (omega[self.nonref] - omega[self.ref])
        f[self.sl_omega] = (self.Pm - Pg - self.D * omega) / (2 * self.H)
        f[self.sl_xp] = -xP / self.TP + P0e * (vr**self.a_s - vr**self.a_t)
        f[self.sl_xq] = -xQ / self.TQ + Q0e * (vr**self.b_s - vr**self.b_t)

        gP = -S.real
        gQ = -S.imag
        np.add.at(gP, gb, Pg)
        np.add.at(gQ, gb, Qg)
        np.add.at(gP, lb, -PL)
        np.add.at(gQ, lb, -QL)
        np.add.at(gQ, self.sbus, u[self.sl_svc] * V[self.sbus] ** 2)
        return f, np.concatenate([gP, gQ])

    # -- Jacobians -------------------------------------------------------------
    def jacobians(self, x, y, u):
        """Return ``(f_x, f_y, f_u, g_x, g_y, g_u)`` as dense arrays."""
        x, y, u = self._unpack(x, y, u)
        delta, omega, th, V, Vc, Y, I, S, dP, dQ, m = self._parts(x, y, u)
        nb, ng, nl = self.nb, self.ng, self.nl
        nx, ny, nu = self.nx, self.ny, self.nu
        gb, lb = self.gbus, self.lbus
        f_x = np.zeros((nx, nx))
        f_y = np.zeros((nx, ny))
        f_u = np.zeros((nx, nu))
        g_x = np.zeros((ny, nx))
        g_y = np.zeros((ny, ny))
        g_u = np.zeros((ny, nu))

        ang = delta - th[gb]
        Vg = V[gb]
        s, c = np.sin(ang), np.cos(ang)
        E, xd = self.E, self.xd
        dPg_dd = E * Vg * c / xd
        dPg_dV = E * s / xd
        dQg_dd = -E * Vg * s / xd
        dQg_dV = (E * c - 2 * Vg) / xd

        # swing equations
        o0 = self.sl_omega.start
        nr = self.nonref
        f_x[np.arange(ng - 1), o0 + nr] = self.ws
        f_x[np.arange(ng - 1), o0 + self.ref] = -self.ws
        rows = o0 + np.arange(ng)
        inv2H = 1.0 / (2 * self.H)
        f_x[rows, rows] = -self.D * inv2H
        f_x[o0 + nr, np.arange(ng - 1)] = -dPg_dd[nr] * inv2H[nr]
        f_y[rows, gb] = dPg_dd * inv2H  # d/dtheta = -d/ddelta
        f_y[rows, nb + gb] = -dPg_dV * inv2H

        # load recovery
        xp0, xq0 = self.sl_xp.start, self.sl_xq.start
        li = np.arange(nl)
        vr = V[lb] / self.Vr
        P0e, Q0e = self.P0 - dP, self.Q0 - dQ
        f_x[xp0 + li, xp0 + li] = -1.0 / self.TP
        f_x[xq0 + li, xq0 + li] = -1.0 / self.TQ
        dvP = (self.a_s * vr ** (self.a_s - 1) - self.a_t * vr ** (self.a_t - 1)) / self.Vr
        dvQ = (self.b_s * vr ** (self.b_s - 1) - self.b_t * vr ** (self.b_t - 1)) / self.Vr
        f_y[xp0 + li, nb + lb] = P0e * dvP
        f_y[xq0 + li, nb + lb] = Q0e * dvQ
        ls0 = self.sl_ls.start
        for a, j in enumerate(self.ls_load):
            f_u[xp0 + j, ls0 + a] = -(vr[j] ** self.a_s[j] - vr[j] ** self.a_t[j])
            f_u[xq0 + j, ls0 + a] = -self.ls_ratio[a] * (vr[j] ** self.b_s[j] - vr[j] ** self.b_t[j])

        # network part of g
        Vn = Vc / V
        dS_dth = 1j * Vc[:, None] * np.conj(np.diag(I) - Y * Vc[None, :])
        dS_dV = Vc[:, None] * np.conj(Y * Vn[None, :]) + np.diag(np.conj(I) * Vn)
        g_y[:nb, :nb] = -dS_dth.real
        g_y[nb:, :nb] = -dS_dth.imag
        g_y[:nb, nb:] = -dS_dV.real
        g_y[nb:, nb:] = -dS_dV.imag

        # machines
        for k in range(ng):
            i = gb[k]
            g_y[i, i] += -dPg_dd[k]
            g_y[i, nb + i] += dPg_dV[k]
            g_y[nb + i, i] += -dQg_dd[k]
            g_y[nb + i, nb + i] += dQg_dV[k]
        g_x[gb[nr], np.arange(ng - 1)] = dPg_dd[nr]
        g_x[nb + gb[nr], np.arange(ng - 1)] = dQg_dd[nr]

        # loads
        for j in range(nl):
            i = lb[j]
            g_x[i, xp0 + j] = -1.0 / self.TP[j]
            g_x[nb + i, xq0 + j] = -1.0 / self.TQ[j]
            g_y[i, nb + i] -= P0e[j] * self.a_t[j] * vr[j] ** (self.a_t[j] - 1) / self.Vr[j]
            g_y[nb + i, nb + i] -= Q0e[j] * self.b_t[j] * vr[j] ** (self.b_t[j] - 1) / self.Vr[j]
        for a, j in enumerate(self.ls_load):
            i = lb[j]
            g_u[i, ls0 + a] += vr[j] ** self.a_t[j]
            g_u[nb + i, ls0 + a] += self.ls_ratio[a] * vr[j] ** self.b_t[j]

        # SVC injection b V^2
        for a, i in enumerate(self.sbus):
            g_y[nb + i, nb + i] += 2 * u[a] * V[i]
            g_u[nb + i, a] += V[i] ** 2

        # LTC ratio
        t0 = self.sl_ltc.start
        for a in range(self.nt):
            h, l, yt, mm = self.t_hv[a], self.t_lv[a], self.t_y[a], m[a]
            dSh = Vc[h] * np.conj(2 * mm * yt * Vc[h] - yt * Vc[l])
            dSl = Vc[l] * np.conj(-yt * Vc[h])
            g_u[h, t0 + a] -= dSh.real
            g_u[nb + h, t0 + a] -= dSh.imag
            g_u[l, t0 + a] -= dSl.real
            g_u[nb + l, t0 + a] -= dSl.imag
        return f_x, f_y, f_u, g_x, g_y, g_u

    # -- helpers -----------------------------------------------------------------
    def voltages(self, y) -> np.ndarray:
        return np.asarray(y)[..., self.nb:]

    def bus_rows(self, bus_ids) -> np.ndarray:
        idx = self.case.bus_index
        return np.array([idx[b] for b in bus_ids], dtype=int)

    def load_powers(self, x, y, u):
        """Consumed (P, Q) per load."""
        x, y, u = self._unpack(x, y, u)
        V = y[self.nb:]
        dP, dQ = self._shed(u)
        vr = V[self.lbus] / self.Vr
        PL = x[self.sl_xp] / self.TP + (self.P0 - dP) * vr**self.a_t
        QL = x[self.sl_xq] / self.TQ + (self.Q0 - dQ) * vr**self.b_t
        return PL, QL

    def generator_powers(self, x, y):
        delta = np.zeros(self.ng)
        delta[self.nonref] = np.asarray(x)[self.sl_delta]
        th, V = np.asarray(y)[:self.nb], np.asarray(y)[self.nb:]
        ang = delta - th[self.gbus]
        Vg = V[self.gbus]
        return self.E * Vg * np.sin(ang) / self.xd, (self.E * Vg * np.cos(ang) - Vg**2) / self.xd


@lru_cache(maxsize=64)
def model_for(case: PowerSystemCase) -> DaeModel:
    return DaeModel(case)


def _as_u(model: DaeModel, u):
    return model.u_vector(u) if isinstance(u, ControlVector) else np.asarray(u, dtype=float)


def dae_residuals(x, y, u, case: PowerSystemCase):
    """``(f, g)`` at ``(x, y, u)``; ``u`` is a ControlVector or the raw vector."""
    model = model_for(case)
    return model.residuals(x, y, _as_u(model, u))


def analytic_jacobians(x, y, u, case: PowerSystemCase):
    model = model_for(case)
    return model.jacobians(x, y, _as_u(model, u))
