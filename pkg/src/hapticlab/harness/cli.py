"""Command line entry point (``hapticlab``)."""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..dynamics import TaskId
from ..koopman import save_model
from ..percept import (ObserverParams, fit_psychometric, sample_population, save_population,
                       simulate_jnd_experiment, write_psychometric_csv)
from .campaign import CONDITIONS, analyse, read_records, run_campaign, write_report
from .checks import contact_check, fem_check
from .config import CampaignConfig, ConfigError, default_config_text, load_config
from .trial import GROUPS, NOMINAL_GRADE, fit_task_model, run_trial


def _config(args) -> CampaignConfig:
    cfg = load_config(args.config) if args.config else CampaignConfig()
    over = {}
    if args.seed is not None:
        over["master_seed"] = args.seed
    if args.trials is not None:
        over["trials"] = args.trials
    if args.plots:
        over["plots"] = True
    return replace(cfg, **over) if over else cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_fit(args, cfg):
    out = _out(args)
    tasks = [TaskId.parse(args.task)] if args.task else list(TaskId)
    for task in tasks:
        model = fit_task_model(task, args.grade, cfg.settings)
        path = out / f"model_{task.short}_g{args.grade}.txt"
        save_model(model, path)
        print(f"{task.short}: N={model.dictionary.dimension} residual={model.fit_residual:.4g} -> {path}")
    return 0


def cmd_simulate(args, cfg):
    out = _out(args)
    seed = np.random.SeedSequence(cfg.master_seed)
    rec, run = run_trial(args.task, args.group, cfg.settings, seed, condition=args.condition,
                         grade=args.grade, return_trace=True)
    t = np.arange(len(run["rendered"])) * cfg.settings.dt
    path = out / f"trial_{rec.task}_{args.condition}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "p", "v", "d", "u", "F_rendered", "F_ideal", "reference"])
        for k in range(len(t)):
            x = run["states"][k]
            w.writerow([repr(float(v)) for v in (t[k], x[0], x[1], x[2], run["inputs"][k],
                                                 run["rendered"][k], run["ideal"][k], run["refs"][k])])
    print(f"eps_F={rec.eps_F:.5g} latency={rec.latency * 1e3:.3f} ms task_error={rec.task_error:.4g} m "
          f"percept_accuracy={rec.percept_accuracy:.3f} -> {path}")
    if cfg.plots:
        from .plots import force_trace

        force_trace(t, {"rendered": run["rendered"], "ideal": run["ideal"]}, out / f"trial_{rec.task}.svg")
    return 0


def cmd_calibrate(args, cfg):
    out = _out(args)
    h = cfg.settings.hyperpriors
    pop = sample_population(h, args.observers, seed=cfg.master_seed)
    save_population(pop, out / "population.txt")
    obs = ObserverParams(1.0, 1.0, 1e-3, args.kappa)
    base = 1.0
    deltas = base * args.kappa * np.array([0.25, 0.5, 1.0, 1.5, 2.0, 3.0])
    table = simulate_jnd_experiment(base, deltas, obs, args.jnd_trials, seed=cfg.master_seed)
    write_psychometric_csv(table, out / "psychometric.csv")
    fit = fit_psychometric(table)
    kappas = np.array([o.weber_fraction for o in pop])
    print(f"population: {len(pop)} observers, mean Weber fraction {kappas.mean():.4f}")
    print(f"JND: true kappa={args.kappa} recovered={fit.weber_fraction:.4f} "
          f"({100 * (fit.weber_fraction / args.kappa - 1):+.1f}%)")
    return 0


def cmd_evaluate(args, cfg):
    out = _out(args)
    res = run_campaign(cfg, out, progress=lambda t, g: print(f"  {t} {g} done", file=sys.stderr))
    if cfg.plots:
        from .plots import campaign_plots

        campaign_plots(res, out)
    print((out / "report.txt").read_text(), end="")
    return 0


def cmd_report(args, cfg):
    src = Path(args.input or args.out)
    records = {c: read_records(src / f"records_{c}.csv") for c in CONDITIONS
               if (src / f"records_{c}.csv").exists()}
    if not records:
        print(f"no records_*.csv in {src}", file=sys.stderr)
        return 2
    out = _out(args)
    res = analyse(records, cfg)
    write_report(res, cfg, out)
    if cfg.plots:
        from .plots import campaign_plots

        campaign_plots(res, out)
    print((out / "report.txt").read_text(), end="")
    return 0


def _print_checks(checks) -> int:
    for c in checks:
        print(c.line())
    return 0 if all(c.passed for c in checks) else 1


def cmd_fem_check(args, cfg):
    return _print_checks(fem_check(cfg.fem))


def cmd_contact_check(args, cfg):
    return _print_checks(contact_check(cfg.contact, seed=cfg.master_seed % 2 ** 32))


def cmd_config(args, cfg):
    print(default_config_text(cfg), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    def flags(suppress: bool) -> argparse.ArgumentParser:
        # subcommand copies must not overwrite values given before the subcommand
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        g = argparse.ArgumentParser(add_help=False)
        g.add_argument("--config", default=d(None), help="INI configuration file")
        g.add_argument("--seed", type=int, default=d(None), help="master seed (unsigned 64-bit)")
        g.add_argument("--out", default=d("hapticlab-out"), help="output directory")
        g.add_argument("--trials", type=int, default=d(None), help="trials per task x group cell")
        g.add_argument("--plots", action="store_true", default=d(False), help="write SVG figures")
        return g

    top, common = flags(False), flags(True)
    p = argparse.ArgumentParser(prog="hapticlab", parents=[top],
                                description="Haptic rendering experiments and verifiers.")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("fit", parents=[common], help="fit lifted models from simulated runs")
    s.add_argument("--task", choices=[t.short for t in TaskId])
    s.add_argument("--grade", type=int, default=NOMINAL_GRADE)
    s.set_defaults(func=cmd_fit)
    s = sub.add_parser("simulate", parents=[common], help="one trial, per-tick CSV")
    s.add_argument("--task", default="T1", choices=[t.short for t in TaskId])
    s.add_argument("--group", default="intermediate", choices=GROUPS)
    s.add_argument("--condition", default="perceptual", choices=CONDITIONS + ("oracle",))
    s.add_argument("--grade", type=int, default=NOMINAL_GRADE)
    s.set_defaults(func=cmd_simulate)
    s = sub.add_parser("calibrate", parents=[common], help="observer population and JND run")
    s.add_argument("--observers", type=int, default=2048)
    s.add_argument("--kappa", type=float, default=0.10)
    s.add_argument("--jnd-trials", type=int, default=1000)
    s.set_defaults(func=cmd_calibrate)
    s = sub.add_parser("evaluate", parents=[common], help="full campaign")
    s.set_defaults(func=cmd_evaluate)
    s = sub.add_parser("report", parents=[common], help="statistics from existing record CSVs")
    s.add_argument("--input", help="directory holding records_*.csv (default: --out)")
    s.set_defaults(func=cmd_report)
    s = sub.add_parser("fem-check", parents=[common], help="finite-element verifier suite")
    s.set_defaults(func=cmd_fem_check)
    s = sub.add_parser("contact-check", parents=[common], help="contact and passivity verifier suite")
    s.set_defaults(func=cmd_contact_check)
    s = sub.add_parser("config", parents=[common], help="print the effective configuration")
    s.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
    except (ConfigError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    return args.func(args, cfg)


if __name__ == "__main__":
    sys.exit(main())
