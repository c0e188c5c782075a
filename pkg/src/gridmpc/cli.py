"""Command line driver: ``gridmpc <stage> [options]``."""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import pipeline as pl
from .case import scale_loads
from .casefile import CaseParseError, load_case
from .integrator import CollapseError, IntegratorConfig, simulate, state_names, write_trajectory_csv
from .model import model_for
from .mpc import ScheduleFormatError, read_schedule, run_receding_horizon, write_schedule
from .nn import ModelFormatError, mlp_forward, r2_score
from .online import OnlineConfig, Surrogates, run_online_loop, write_corrections_csv, write_timing_csv
from .powerflow import DivergedCaseError, initialize_equilibrium
from .report import BenchmarkReport, Table, emit_report, r2_table, schedule_table
from .scenarios import get_scenario
from .sensitivity import validate_channels

log = logging.getLogger("gridmpc")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--case", default="9bus", help="bundled case name (9bus, 39bus) or case file path")
    p.add_argument("--scenario", default=None, help="fault5, fault15 or none (default depends on the case)")
    p.add_argument("--load-factor", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="out")
    p.add_argument("--fast", action="store_true", help="coarse sampling and a small dataset")
    p.add_argument("--models-dir", default=None, help="surrogate model directory (default OUT/models)")
    p.add_argument("--schedule", default=None, help="nominal schedule file (default OUT/schedule.txt)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridmpc", description="MPC-based emergency voltage control")
    sub = parser.add_subparsers(dest="stage", required=True)
    common = _common()
    p = sub.add_parser("simulate", parents=[common], help="time-domain run of the scenario")
    p.add_argument("--no-control", action="store_true", help="ignore any schedule")
    p.add_argument("--t-end", type=float, default=None)
    sub.add_parser("offline-mpc", parents=[common], help="nominal receding-horizon schedule")
    p = sub.add_parser("validate-sensitivity", parents=[common], help="sensitivities vs finite differences")
    p.add_argument("--window", type=float, default=3.0, help="seconds after the first control instant")
    p.add_argument("--tol", type=float, default=0.02)
    p = sub.add_parser("gen-data", parents=[common], help="surrogate training data")
    p.add_argument("--n-scenarios", type=int, default=None)
    sub.add_parser("train", parents=[common], help="train the three surrogates")
    sub.add_parser("online", parents=[common], help="closed-loop online correction")
    sub.add_parser("benchmark", parents=[common], help="online loop across load levels and timing")
    return parser


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("GRIDMPC_THREADS", "1")))
    except ValueError:
        return 1


class _Ctx:
    def __init__(self, args):
        self.args = args
        self.profile = pl.get_profile(args.fast)
        self.out = args.out_dir
        os.makedirs(self.out, exist_ok=True)
        self.schedule_path = args.schedule or os.path.join(self.out, "schedule.txt")
        self.models_dir = args.models_dir or os.path.join(self.out, "models")
        self.data_dir = os.path.join(self.out, "data")
        self.scenario_name = args.scenario or pl.default_scenario(args.case)

    def path(self, name):
        return os.path.join(self.out, name)

    def design(self, build=True):
        if os.path.exists(self.schedule_path):
            return pl.build_design(self.args.case, self.scenario_name, self.profile, self.schedule_path)
        if not build:
            raise FileNotFoundError(f"no schedule at {self.schedule_path}; run offline-mpc first")
        log.info("no schedule at %s; running the offline MPC", self.schedule_path)
        d = pl.build_design(self.args.case, self.scenario_name, self.profile)
        write_schedule(d.schedule, self.schedule_path)
        return d

    def models(self, design, build=True):
        if pl.models_present(self.models_dir):
            return Surrogates.load(self.models_dir), {}
        if not build:
            raise FileNotFoundError(f"no models in {self.models_dir}; run train first")
        log.info("no models in %s; generating data and training", self.models_dir)
        data = pl.make_datasets(design, self.profile, self.args.seed, _threads())
        pl.save_datasets(data, self.data_dir)
        models, r2 = pl.train_surrogates(data, self.profile, self.args.seed)
        models.save(self.models_dir)
        r2_table(r2).write_csv(self.path("r2.csv"))
        return models, r2


def cmd_simulate(ctx: _Ctx) -> int:
    a = ctx.args
    case = load_case(a.case)
    sc = get_scenario(ctx.scenario_name)
    eq = initialize_equilibrium(scale_loads(case, a.load_factor))
    case0 = eq.case
    controls = []
    if not a.no_control and a.schedule:
        controls = read_schedule(a.schedule).to_controls(case0)
    t_end = a.t_end if a.t_end is not None else sc.t_end
    cfg = IntegratorConfig(T_s=ctx.profile.T_s, substeps=ctx.profile.substeps)
    traj = simulate(case0, sc.events(case0), controls, 0.0, t_end, cfg, eq.x, eq.y)
    ids = [b.id for b in case0.buses]
    write_trajectory_csv(traj, ctx.path("trajectory.csv"), ids, state_names(model_for(case0)))
    late = traj.t >= 10.0
    if np.any(late):
        j = int(np.argmin(traj.V[late].min(axis=0)))
        print(f"min voltage after t = 10 s: {traj.V[late].min():.6g} p.u. at bus {ids[j]}")
    print(f"wrote {ctx.path('trajectory.csv')}")
    return 0


def cmd_offline(ctx: _Ctx) -> int:
    a = ctx.args
    case = load_case(a.case)
    sc = get_scenario(ctx.scenario_name).with_load(a.load_factor)
    res = run_receding_horizon(case, sc, pl.mpc_config(ctx.profile), verbose=a.verbose)
    write_schedule(res.schedule, ctx.schedule_path)
    schedule_table(res.schedule).write_csv(ctx.path("schedule_table.csv"))
    schedule_table(res.schedule, cumulative=True).write_csv(ctx.path("schedule_cumulative.csv"))
    write_trajectory_csv(res.trajectory, ctx.path("offline_trajectory.csv"), [b.id for b in res.case.buses])
    steps = Table(["k", "t", "status", "kkt", "objective", "max_slack", "wall_s"])
    for s in res.steps:
        steps.add(s.k, s.t, s.status, s.kkt, s.objective, float(np.max(s.slack)) if s.slack is not None else 0.0,
                  s.wall_time)
    steps.write_csv(ctx.path("offline_steps.csv"))
    print(schedule_table(res.schedule).markdown())
    print(f"instants: {', '.join(f'{t:g}' for t in res.schedule.times)} s; "
          f"max KKT residual {max(s.kkt for s in res.steps):.3g}; mean step {np.mean(res.step_times):.3g} s")
    return 0


def cmd_validate(ctx: _Ctx) -> int:
    a = ctx.args
    case = load_case(a.case)
    sc = get_scenario(ctx.scenario_name)
    eq = initialize_equilibrium(scale_loads(case, a.load_factor))
    case0 = eq.case
    chans = [f"svc:{case0.svcs[0].bus}", f"ls:{case0.ls_actuators[0].bus}", f"ltc:{case0.ltcs[0].id}"]
    cfg = IntegratorConfig(T_s=ctx.profile.T_s, substeps=ctx.profile.substeps)
    n = int(round(a.window / cfg.T_s))
    rows = validate_channels(case0, sc.events(case0), [], chans, sc.t_first, n, config=cfg, x0=eq.x, y0=eq.y)
    tab = Table(["channel", "sup_rel_error", "max_abs_sensitivity", "pass"])
    for ch, err, mag, _ in rows:
        tab.add(ch, err, mag, err < a.tol)
    tab.write_csv(ctx.path("sensitivity_validation.csv"))
    print(tab.markdown())
    return 0 if all(err < a.tol for _, err, _, _ in rows) else 1


def cmd_gen_data(ctx: _Ctx) -> int:
    design = ctx.design()
    profile = ctx.profile
    if ctx.args.n_scenarios:
        profile = pl.Profile(profile.name, profile.T_s, profile.substeps, ctx.args.n_scenarios, profile.epochs,
                             profile.lr_decay)
    data = pl.make_datasets(design, profile, ctx.args.seed, _threads())
    pl.save_datasets(data, ctx.data_dir)
    for kind in pl.KINDS:
        ds = data[kind]
        print(f"{kind}: {len(ds)} rows ({len(ds.train_idx)} train / {len(ds.test_idx)} test), "
              f"{ds.X.shape[1]} inputs, {ds.Y.shape[1]} targets")
    if data["skipped"]:
        print(f"skipped {len(data['skipped'])} collapsed scenarios")
    return 0


def cmd_train(ctx: _Ctx) -> int:
    data = pl.load_datasets(ctx.data_dir)
    models, r2 = pl.train_surrogates(data, ctx.profile, ctx.args.seed)
    models.save(ctx.models_dir)
    tab = r2_table(r2)
    tab.write_csv(ctx.path("r2.csv"))
    print(tab.markdown())
    return 0


def cmd_online(ctx: _Ctx) -> int:
    design = ctx.design(build=False)
    models, _ = ctx.models(design, build=False)
    res = run_online_loop(design, ctx.args.load_factor, models, OnlineConfig.from_design(design))
    ids = [b.id for b in design.case.buses]
    write_trajectory_csv(res.trajectory, ctx.path("online_trajectory.csv"), ids)
    write_corrections_csv(res, ctx.path("corrections.csv"), load_case(ctx.args.case).channel_labels())
    write_timing_csv(res.timing, ctx.path("online_timing.csv"))
    print(f"load factor {res.load_factor:g}: final V in [{res.final_V.min():.4f}, {res.final_V.max():.4f}] p.u.; "
          f"step {res.timing.mean_ms:.3g} ms mean, {res.timing.max_ms:.3g} ms max")
    return 0 if res.band_ok() else 1


def cmd_benchmark(ctx: _Ctx) -> int:
    design = ctx.design()
    models, r2 = ctx.models(design)
    if not r2 and os.path.exists(ctx.data_dir):
        try:
            data = pl.load_datasets(ctx.data_dir)
            r2 = {k: r2_score(mlp_forward(getattr(models, k), data[k].test[0]), data[k].test[1]) for k in pl.KINDS}
        except (FileNotFoundError, ValueError) as exc:
            log.warning("R^2 table unavailable: %s", exc)
    rep: BenchmarkReport = pl.benchmark(design, models, r2=r2, case_name=ctx.args.case)
    paths = emit_report(rep, ctx.out)
    with open(paths["markdown"]) as fh:
        print(fh.read())
    print(f"speedup: {rep.speedup:.6g}")
    return 0 if rep.all_in_band else 1


COMMANDS = {"simulate": cmd_simulate, "offline-mpc": cmd_offline, "validate-sensitivity": cmd_validate,
            "gen-data": cmd_gen_data, "train": cmd_train, "online": cmd_online, "benchmark": cmd_benchmark}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.stage](_Ctx(args))
    except (CaseParseError, ScheduleFormatError, ModelFormatError, FileNotFoundError, DivergedCaseError,
            CollapseError, ValueError) as exc:
        print(f"gridmpc {args.stage}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
