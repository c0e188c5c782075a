"""Structured-text case files.

A case file is a sequence of named sections. Rows are whitespace-delimited,
``#`` starts a comment. Column order per section::

    [case]        key value          (name, base_mva, freq)
    [buses]       id V theta shunt_b lv
    [lines]       id from to r x b [tap] [in_service]
    [generators]  id bus H D xd_p P_set V_set ref
    [loads]       bus P0 Q0 T_P T_Q alpha_s alpha_t beta_s beta_t V0
    [svc]         id bus b0 u_min u_max b_max K_r T_r
    [ltc]         id hv lv x m m_min m_max tap_step T_mech
    [ls]          id bus u_min u_max
    [avc]         ltc V_r V_db

Flags (``lv``, ``in_service``, ``ref``) are 0/1. ``V0 = 0`` selects the
initial power-flow voltage as the load reference.
"""
from __future__ import annotations

from importlib import resources
from pathlib import Path

from .case import (AvcSetting, Bus, CaseError, ErLoad, Generator, Line, LsActuator,
                   LtcTransformer, PowerSystemCase, SvcDevice)


class CaseParseError(ValueError):
    def __init__(self, msg, line_no=None, path=None):
        where = f"{path or '<case>'}:{line_no}: " if line_no is not None else ""
        super().__init__(where + msg)
        self.line_no = line_no


def _flag(s):
    if s not in ("0", "1"):
        raise ValueError(f"flag must be 0 or 1, got {s!r}")
    return s == "1"


# name -> (min columns, max columns, builder)
_SECTIONS = {
    "buses": (5, 5, lambda c: Bus(int(c[0]), float(c[1]), float(c[2]), float(c[3]), _flag(c[4]))),
    "lines": (6, 8, lambda c: Line(int(c[0]), int(c[1]), int(c[2]), float(c[3]), float(c[4]), float(c[5]),
                                   float(c[6]) if len(c) > 6 else 1.0,
                                   _flag(c[7]) if len(c) > 7 else True)),
    "generators": (8, 8, lambda c: Generator(int(c[0]), int(c[1]), float(c[2]), float(c[3]), float(c[4]),
                                             float(c[5]), float(c[6]), _flag(c[7]))),
    "loads": (10, 10, lambda c: ErLoad(int(c[0]), *map(float, c[1:10]))),
    "svc": (8, 8, lambda c: SvcDevice(int(c[0]), int(c[1]), *map(float, c[2:8]))),
    "ltc": (9, 9, lambda c: LtcTransformer(int(c[0]), int(c[1]), int(c[2]), *map(float, c[3:9]))),
    "ls": (4, 4, lambda c: LsActuator(int(c[0]), int(c[1]), float(c[2]), float(c[3]))),
    "avc": (3, 3, lambda c: AvcSetting(int(c[0]), float(c[1]), float(c[2]))),
}
_FIELD = {"buses": "buses", "lines": "lines", "generators": "generators", "loads": "loads",
          "svc": "svcs", "ltc": "ltcs", "ls": "ls_actuators", "avc": "avc"}


def parse_case(text: str, path=None) -> PowerSystemCase:
    rows = {k: [] for k in _SECTIONS}
    meta = {"name": Path(path).stem if path else "case", "base_mva": "100", "freq": "60"}
    section = None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise CaseParseError(f"malformed section header {line!r}", no, path)
            section = line[1:-1].strip().lower()
            if section != "case" and section not in _SECTIONS:
                raise CaseParseError(f"unknown section [{section}]", no, path)
            continue
        if section is None:
            raise CaseParseError("data before first section header", no, path)
        cols = line.split()
        if section == "case":
            if len(cols) != 2 or cols[0] not in meta:
                raise CaseParseError(f"bad [case] entry {line!r}", no, path)
            meta[cols[0]] = cols[1]
            continue
        lo, hi, build = _SECTIONS[section]
        if not lo <= len(cols) <= hi:
            raise CaseParseError(f"[{section}] expects {lo}..{hi} columns, got {len(cols)}", no, path)
        try:
            rows[section].append(build(cols))
        except (ValueError, CaseError) as exc:
            raise CaseParseError(f"[{section}] {exc}", no, path) from exc
    try:
        return PowerSystemCase(name=meta["name"], base_mva=float(meta["base_mva"]), freq=float(meta["freq"]),
                               **{_FIELD[k]: tuple(v) for k, v in rows.items()})
    except CaseError as exc:
        raise CaseParseError(f"invalid case: {exc}", None, path) from exc


BUNDLED = {"9bus": "ieee9.case", "39bus": "ieee39.case"}


def load_case(path) -> PowerSystemCase:
    """Load a case file, or a bundled case by name (``9bus``, ``39bus``)."""
    if str(path) in BUNDLED:
        text = resources.files("gridmpc").joinpath("cases").joinpath(BUNDLED[str(path)]).read_text()
        return parse_case(text, path=BUNDLED[str(path)])
    p = Path(path)
    return parse_case(p.read_text(), path=str(p))


def _g(v):
    return repr(float(v))


def write_case(case: PowerSystemCase) -> str:
    out = ["[case]", f"name {case.name}", f"base_mva {_g(case.base_mva)}", f"freq {_g(case.freq)}", "", "[buses]"]
    out += [f"{b.id} {_g(b.V)} {_g(b.theta)} {_g(b.shunt_b)} {int(b.is_lv_side)}" for b in case.buses]
    out += ["", "[lines]"]
    out += [f"{l.id} {l.from_bus} {l.to_bus} {_g(l.r)} {_g(l.x)} {_g(l.b)} {_g(l.tap)} {int(l.in_service)}"
            for l in case.lines]
    out += ["", "[generators]"]
    out += [f"{g.id} {g.bus} {_g(g.H)} {_g(g.D)} {_g(g.xd_p)} {_g(g.P_set)} {_g(g.V_set)} {int(g.is_ref)}"
            for g in case.generators]
    out += ["", "[loads]"]
    out += [" ".join([str(d.bus)] + [_g(v) for v in (d.P0, d.Q0, d.T_P, d.T_Q, d.alpha_s, d.alpha_t,
                                                     d.beta_s, d.beta_t, d.V0)]) for d in case.loads]
    out += ["", "[svc]"]
    out += [" ".join([str(d.id), str(d.bus)] + [_g(v) for v in (d.b0, d.u_min, d.u_max, d.b_max, d.K_r, d.T_r)])
            for d in case.svcs]
    out += ["", "[ltc]"]
    out += [" ".join([str(d.id), str(d.hv_bus), str(d.lv_bus)] +
                     [_g(v) for v in (d.x, d.m, d.m_min, d.m_max, d.tap_step, d.T_mech)]) for d in case.ltcs]
    out += ["", "[ls]"]
    out += [f"{d.id} {d.bus} {_g(d.u_min)} {_g(d.u_max)}" for d in case.ls_actuators]
    out += ["", "[avc]"]
    out += [f"{a.ltc} {_g(a.V_r)} {_g(a.V_db)}" for a in case.avc]
    return "\n".join(out) + "\n"
