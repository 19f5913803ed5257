"""Full factorial campaign: tasks x groups x trials for every rendering condition.

Seeds
-----
Trial ``k`` of group ``g`` on task ``t`` draws from
``SeedSequence(master_seed, spawn_key=(t, g, k))`` with ``t`` and ``g`` the
positions in ``TASKS`` and ``GROUPS``. All conditions reuse that seed, so
their differences are not confounded by the user's noise. Bootstrap and power
streams use spawn keys ``(100, i)``, which no trial key can collide with.

Outputs
-------
``records_<condition>.csv``
    One row per trial, columns ``RECORD_COLUMNS``.
``anova.csv``, ``manova.csv``, ``bayes.csv``, ``effects.csv``,
``pairwise.csv``, ``power.csv``, ``hpi.csv``, ``report.txt``
    Statistics derived from the records and the master seed only.
``timing.txt``
    Measured per-tick compute times; machine dependent, so kept apart from the
    reproducible outputs.
``failures.txt``
    Written only when trials fail; the records of completed trials are still
    flushed.
"""

from __future__ import annotations

import csv
import io
import itertools
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import CampaignConfig
from .hpi import HPI_METRICS, hpi_from_records
from .stats import (AnovaModel, StatsError, bayes_regress_records, effect_stats, fit_anova,
                    manova_wilks, power_mc)
from .trial import CONDITIONS, GROUPS, RECORD_COLUMNS, TASKS, TrialRecord, run_trial

ANOVA_METRICS = ("eps_F", "latency", "percept_accuracy", "task_error", "smoothness_norm")
MANOVA_METRICS = tuple(name for name, _ in HPI_METRICS)
POWER_EFFECTS = (0.0, 0.2, 0.5)
_STATS_KEY = 100


class CampaignError(RuntimeError):
    """One or more trials failed; completed results were flushed."""


@dataclass
class CampaignResult:
    records: dict  # condition -> list[TrialRecord]
    anova: dict = field(default_factory=dict)
    manova: dict = field(default_factory=dict)
    bayes: dict = field(default_factory=dict)
    effects: dict = field(default_factory=dict)
    power: list = field(default_factory=list)
    hpi: object = None
    failures: list = field(default_factory=list)
    elapsed: float = 0.0

    def mean(self, condition: str, metric: str, task: str = None) -> float:
        rs = [r for r in self.records[condition] if task is None or r.task == task]
        return float(np.mean([getattr(r, metric) for r in rs]))

    def compute_times(self) -> np.ndarray:
        return np.array([r.compute_time for rs in self.records.values() for r in rs])


def trial_seed(master_seed: int, task_index: int, group_index: int, trial: int):
    return np.random.SeedSequence(master_seed, spawn_key=(task_index, group_index, trial))


def _stats_seed(master_seed: int, i: int):
    return np.random.SeedSequence(master_seed, spawn_key=(_STATS_KEY, i))


def run_trials(cfg: CampaignConfig, conditions=CONDITIONS, progress=None):
    """Run every trial in a fixed order; returns ``(records, failures)``."""
    records = {c: [] for c in conditions}
    failures = []
    for (ti, task), (gi, group) in itertools.product(enumerate(TASKS), enumerate(GROUPS)):
        for k in range(cfg.trials):
            seed = trial_seed(cfg.master_seed, ti, gi, k)
            for c in conditions:
                try:
                    records[c].append(run_trial(task, group, cfg.settings, seed, condition=c,
                                                trial_index=k))
                except Exception as exc:  # recorded in the manifest, campaign continues
                    failures.append((task.short, group, k, c, f"{type(exc).__name__}: {exc}"))
        if progress:
            progress(task.short, group)
    return records, failures


def analyse(records: dict, cfg: CampaignConfig, result: CampaignResult = None) -> CampaignResult:
    """Statistics and HPI for a dict of per-condition records."""
    res = result or CampaignResult(records)
    for c, rs in records.items():
        for m in ANOVA_METRICS:
            try:
                res.anova[(c, m)] = fit_anova(rs, m)
            except StatsError:
                pass
        for factor in ("group", "task"):
            try:
                res.manova[(c, factor)] = manova_wilks(rs, MANOVA_METRICS, factor)
            except StatsError:
                pass
        try:
            res.bayes[c] = bayes_regress_records(rs)
        except StatsError:
            pass
    conds = [c for c in CONDITIONS if c in records]
    pooled = [r for c in conds for r in records[c]]
    i = 0
    for a, b in itertools.combinations(conds, 2):
        for task in sorted({r.task for r in pooled}):
            sub = [r for r in pooled if r.task == task and r.condition in (a, b)]
            res.effects[(a, b, task)] = effect_stats(sub, "eps_F", "condition", (a, b),
                                                     n_boot=cfg.n_boot, seed=_stats_seed(cfg.master_seed, i))
            i += 1
    if "perceptual" in records:
        res.effects[("novice", "expert", "all")] = effect_stats(
            records["perceptual"], "task_error", "group", ("novice", "expert"), n_boot=cfg.n_boot,
            seed=_stats_seed(cfg.master_seed, i))
        i += 1
    for j, eff in enumerate(POWER_EFFECTS):
        pw = power_mc({"effect": eff}, cfg.trials, 0.05, cfg.power_replicates,
                      seed=_stats_seed(cfg.master_seed, 50 + j))
        res.power.append((eff, cfg.trials, pw))
    if len(conds) > 1:
        labels = [r.condition for r in pooled]
        res.hpi = hpi_from_records(pooled, labels, n_boot=cfg.n_boot,
                                   seed=_stats_seed(cfg.master_seed, 99))
    return res


def run_campaign(cfg: CampaignConfig, out_dir=None, conditions=CONDITIONS, progress=None) -> CampaignResult:
    """Run, analyse and (when ``out_dir`` is given) write the report bundle."""
    t0 = time.perf_counter()
    records, failures = run_trials(cfg, conditions, progress)
    res = CampaignResult(records, failures=failures)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_records(records, out)
        if failures:
            write_failures(failures, out)
            raise CampaignError(f"{len(failures)} trial(s) failed; see {out / 'failures.txt'}")
    elif failures:
        raise CampaignError(f"{len(failures)} trial(s) failed: {failures[0]}")
    analyse(records, cfg, res)
    res.elapsed = time.perf_counter() - t0
    if out_dir is not None:
        write_report(res, cfg, Path(out_dir))
        write_timing(res, Path(out_dir))
    return res


# ----------------------------------------------------------------------------
# writers

def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_records(records: dict, out: Path) -> None:
    for c, rs in records.items():
        with open(out / f"records_{c}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RECORD_COLUMNS)
            for r in rs:
                w.writerow([_fmt(getattr(r, k)) for k in RECORD_COLUMNS])


def read_records(path) -> list:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(TrialRecord(
                task=row["task"], group=row["group"], trial_index=int(row["trial_index"]),
                seed=int(row["seed"]), eps_F=float(row["eps_F"]), latency=float(row["latency"]),
                percept_accuracy=float(row["percept_accuracy"]), task_error=float(row["task_error"]),
                smoothness_raw=float(row["smoothness_raw"]),
                smoothness_norm=float(row["smoothness_norm"]), user=int(row["user"]),
                grade=int(row["grade"]), condition=row["condition"]))
    return out


def write_failures(failures, out: Path) -> None:
    with open(out / "failures.txt", "w") as fh:
        fh.write("task\tgroup\ttrial\tcondition\terror\n")
        for f in failures:
            fh.write("\t".join(str(v) for v in f) + "\n")


def _csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _g(v) -> str:
    return f"{v:.4g}" if isinstance(v, float) else str(v)


def write_report(res: CampaignResult, cfg: CampaignConfig, out: Path) -> None:
    _csv(out / "anova.csv", ("condition", "metric", "effect", "ss", "df", "ms", "F", "p", "verdict",
                             "user_variance"),
         [(c, m, eff, row.ss, row.df, row.ms, row.F, row.p, row.verdict, model.user_variance)
          for (c, m), model in res.anova.items() for eff, row in model.table.items()])
    _csv(out / "manova.csv", ("condition", "factor", "wilks_lambda", "chi2", "df", "p"),
         [(c, f, r.wilks_lambda, r.chi2, r.df, r.p) for (c, f), r in res.manova.items()])
    rows = []
    for c, post in res.bayes.items():
        for i, name in enumerate(post.names):
            rows.append((c, name, float(post.mean[i]), float(post.covariance[i, i]),
                         float(post.credible[i, 0]), float(post.credible[i, 1])))
    _csv(out / "bayes.csv", ("condition", "coefficient", "mean", "variance", "ci_low", "ci_high"), rows)
    _csv(out / "effects.csv", ("a", "b", "task", "cohens_d", "partial_eta_sq", "ci_low", "ci_high"),
         [(a, b, t, e.cohens_d, e.partial_eta_sq, e.bootstrap_ci[0], e.bootstrap_ci[1])
          for (a, b, t), e in res.effects.items()])
    _csv(out / "pairwise.csv", ("scope", "a", "b", "p_bonferroni"),
         [(t, u, v, p) for (a, b, t), e in res.effects.items()
          for (u, v), p in e.bonferroni_pairwise.items()])
    _csv(out / "power.csv", ("effect_sd", "n_per_cell", "type1_rate", "power", "type1_se", "power_se",
                             "replicates"),
         [(eff, n, p.type1_rate, p.power, p.type1_se, p.power_se, p.n_replicates)
          for eff, n, p in res.power])
    h = res.hpi
    hrows = []
    if h is not None:
        hrows += [("weight", name, float(w)) for (name, _), w in zip(HPI_METRICS, h.weights)]
        hrows += [("score", c, v) for c, v in h.condition_scores.items()]
        hrows += [("gap_probability", f"{a}>{b}", h.gap_probability(a, b))
                  for (a, b) in h.gap_samples]
    _csv(out / "hpi.csv", ("kind", "name", "value"), hrows)
    (out / "report.txt").write_text(format_report(res, cfg))


def format_report(res: CampaignResult, cfg: CampaignConfig) -> str:
    buf = io.StringIO()
    p = lambda *a: print(*a, file=buf)  # noqa: E731
    n = {c: len(rs) for c, rs in res.records.items()}
    p(f"campaign: master_seed={cfg.master_seed} trials/cell={cfg.trials} records={n}")
    p("")
    p("mean eps_F by task (condition order " + ", ".join(res.records) + ")")
    tasks = sorted({r.task for rs in res.records.values() for r in rs})
    for t in tasks:
        vals = [res.mean(c, "eps_F", t) for c in res.records]
        p(f"  {t}: " + "  ".join(f"{v:.4f}" for v in vals))
    for metric in ("latency", "percept_accuracy", "task_error", "smoothness_norm"):
        p(f"mean {metric}: " + "  ".join(f"{c}={res.mean(c, metric):.4g}" for c in res.records))
    p("")
    p("two-way ANOVA (group x task), F / p")
    for (c, m), model in res.anova.items():
        cells = []
        for eff, row in model.table.items():
            if eff == "error":
                continue
            cells.append(f"{eff}: {row.verdict}" if row.verdict == "no variance"
                         else f"{eff}: F={row.F:.3g} p={row.p:.3g}")
        p(f"  {c:10s} {m:16s} " + "; ".join(cells) + f"; sigma_u^2={model.user_variance:.3g}")
    p("")
    p("MANOVA (Wilks lambda, Bartlett chi2 p) on " + ", ".join(MANOVA_METRICS))
    for (c, f), r in res.manova.items():
        p(f"  {c:10s} {f:6s} lambda={r.wilks_lambda:.4g} chi2={r.chi2:.4g} df={r.df} p={r.p:.3g}")
    p("")
    p("Bayesian regression task_error ~ b0 + b1 eps_F + b2 latency (mean [95% CI])")
    for c, post in res.bayes.items():
        cells = [f"{nm}={post.mean[i]:.3g} [{post.credible[i, 0]:.3g}, {post.credible[i, 1]:.3g}]"
                 for i, nm in enumerate(post.names)]
        p(f"  {c:10s} " + "  ".join(cells))
    p("")
    p("effect sizes (Cohen's d, partial eta^2, bootstrap 95% CI of the mean difference)")
    for (a, b, t), e in res.effects.items():
        p(f"  {a} vs {b} [{t}]: d={e.cohens_d:.3g} eta2={e.partial_eta_sq:.3g} "
          f"CI=[{e.bootstrap_ci[0]:.4g}, {e.bootstrap_ci[1]:.4g}]")
    p("")
    p("Monte Carlo power of the group F-test (3 x 3 design)")
    for eff, nn, pw in res.power:
        p(f"  effect={eff} SD n/cell={nn}: type-I={pw.type1_rate:.3f} power={pw.power:.3f} "
          f"(MC SE {pw.power_se:.3f})")
    if res.hpi is not None:
        h = res.hpi
        p("")
        p("HPI weights: " + ", ".join(f"{nm}={w:.3f}" for (nm, _), w in zip(HPI_METRICS, h.weights))
          + (" (equal-weight fallback)" if h.equal_weight_fallback else ""))
        p("HPI by condition: " + ", ".join(f"{c}={v:.3f}" for c, v in h.condition_scores.items()))
        for (a, b) in h.gap_samples:
            if CONDITIONS.index(a) > CONDITIONS.index(b) if a in CONDITIONS and b in CONDITIONS else False:
                p(f"  P(HPI {a} > HPI {b}) = {h.gap_probability(a, b):.4f}")
    if res.failures:
        p("")
        p(f"{len(res.failures)} failed trial(s); see failures.txt")
    return buf.getvalue()


def write_timing(res: CampaignResult, out: Path) -> None:
    ct = res.compute_times()
    lines = [f"trials: {ct.size}",
             f"median per-trial median tick compute time: {np.median(ct) * 1e6:.2f} us",
             f"max per-trial median tick compute time: {np.max(ct) * 1e6:.2f} us",
             f"campaign wall time: {res.elapsed:.1f} s"]
    for c, rs in res.records.items():
        lines.append(f"{c}: median {np.median([r.compute_time for r in rs]) * 1e6:.2f} us")
    (out / "timing.txt").write_text("\n".join(lines) + "\n")
