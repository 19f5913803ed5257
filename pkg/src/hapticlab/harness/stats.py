"""Statistical analysis of trial records.

Records may be :class:`TrialRecord` instances or mappings; fields are read by
name. All tests are closed-form except the bootstrap and power simulations,
which are seeded.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats as sps


class StatsError(ValueError):
    """Design or data problem preventing an analysis."""


def _get(record, name):
    return record[name] if isinstance(record, dict) else getattr(record, name)


def column(records, name: str) -> np.ndarray:
    return np.array([_get(r, name) for r in records])


def _levels(values) -> list:
    return sorted(set(values.tolist()), key=str)


# ----------------------------------------------------------------------------
# two-way ANOVA

@dataclass(frozen=True)
class EffectRow:
    ss: float
    df: int
    ms: float
    F: float
    p: float
    verdict: str


@dataclass(frozen=True)
class AnovaModel:
    """Balanced two-way fixed-effects ANOVA with a user variance component.

    Effects use sum-to-zero coding. ``user_variance`` is the method-of-moments
    estimate from the users-within-groups mean square (floored at zero).
    """

    grand_mean: float
    group_effects: dict
    task_effects: dict
    interaction: dict
    user_variance: float
    residual_variance: float
    table: dict
    n_per_cell: int

    def ss_error(self) -> float:
        return self.table["error"].ss


def two_way_sums(y: np.ndarray):
    """Sums of squares of a balanced ``(..., a, b, n)`` array.

    Returns ``(SS_A, SS_B, SS_AB, SS_E)`` over the leading batch axes, which lets
    the Monte Carlo routines evaluate many replicates at once.
    """
    a, b, n = y.shape[-3:]
    gm = y.mean(axis=(-3, -2, -1), keepdims=True)
    cell = y.mean(axis=-1, keepdims=True)
    ma = y.mean(axis=(-2, -1), keepdims=True)
    mb = y.mean(axis=(-3, -1), keepdims=True)
    ss_a = b * n * ((ma - gm) ** 2).sum(axis=(-3, -2, -1))
    ss_b = a * n * ((mb - gm) ** 2).sum(axis=(-3, -2, -1))
    ss_ab = n * ((cell - ma - mb + gm) ** 2).sum(axis=(-3, -2, -1))
    ss_e = ((y - cell) ** 2).sum(axis=(-3, -2, -1))
    return ss_a, ss_b, ss_ab, ss_e


def _cube(records, metric, f1, f2):
    y = column(records, metric).astype(float)
    g = column(records, f1)
    t = column(records, f2)
    L1, L2 = _levels(g), _levels(t)
    counts = {(i, j): 0 for i in L1 for j in L2}
    for gi, ti in zip(g.tolist(), t.tolist()):
        counts[(gi, ti)] += 1
    n = set(counts.values())
    if len(n) != 1 or 0 in n:
        raise StatsError("unbalanced design: rebalance or subsample to equal cell counts")
    n = n.pop()
    cube = np.empty((len(L1), len(L2), n))
    order = np.lexsort((np.arange(len(y)),))
    fill = {k: 0 for k in counts}
    for k in order:
        key = (g[k].item(), t[k].item())
        i, j = L1.index(key[0]), L2.index(key[1])
        cube[i, j, fill[key]] = y[k]
        fill[key] += 1
    return cube, L1, L2


def _row(ss, df, ms_e, df_e):
    ms = ss / df if df > 0 else float("nan")
    if not ms_e > 0:
        return EffectRow(ss, df, ms, float("nan"), 1.0, "no variance")
    F = ms / ms_e
    p = float(sps.f.sf(F, df, df_e))
    return EffectRow(ss, df, ms, F, min(max(p, 0.0), 1.0), "significant" if p < 0.05 else "n.s.")


def fit_anova(records, metric: str, factors=("group", "task"), user_field: str = "user") -> AnovaModel:
    """Two-way ANOVA of ``metric`` over ``factors`` with F-tests against the residual.

    Users are taken as nested in the first factor. When every user has more
    than one observation, ``sigma_u^2 = max((MS_U - MS_R) / m, 0)`` with ``m``
    observations per user, ``MS_U`` the users-within-groups mean square and
    ``MS_R`` the residual after removing users.
    """
    f1, f2 = factors
    cube, L1, L2 = _cube(records, metric, f1, f2)
    a, b, n = cube.shape
    if n < 2:
        raise StatsError("need at least two observations per cell")
    ss_a, ss_b, ss_ab, ss_e = (float(v) for v in two_way_sums(cube))
    df_e = a * b * (n - 1)
    ms_e = ss_e / df_e
    table = {
        f1: _row(ss_a, a - 1, ms_e, df_e),
        f2: _row(ss_b, b - 1, ms_e, df_e),
        f"{f1}:{f2}": _row(ss_ab, (a - 1) * (b - 1), ms_e, df_e),
        "error": EffectRow(ss_e, df_e, ms_e, float("nan"), float("nan"), ""),
    }
    gm = float(cube.mean())
    ma = cube.mean(axis=(1, 2))
    mb = cube.mean(axis=(0, 2))
    cell = cube.mean(axis=2)
    inter = cell - ma[:, None] - mb[None, :] + gm
    user_var = _user_variance(records, metric, f1, f2, user_field, ss_e, df_e)
    return AnovaModel(
        grand_mean=gm,
        group_effects={k: float(v - gm) for k, v in zip(L1, ma)},
        task_effects={k: float(v - gm) for k, v in zip(L2, mb)},
        interaction={(i, j): float(inter[x, y]) for x, i in enumerate(L1) for y, j in enumerate(L2)},
        user_variance=user_var,
        residual_variance=ms_e,
        table=table,
        n_per_cell=n,
    )


def _user_variance(records, metric, f1, f2, user_field, ss_e, df_e) -> float:
    try:
        users = column(records, user_field)
    except (AttributeError, KeyError):
        return 0.0
    y = column(records, metric).astype(float)
    g = column(records, f1)
    t = column(records, f2)
    # residual after group x task cell means, then user means within group
    cells = {}
    for k, key in enumerate(zip(g.tolist(), t.tolist())):
        cells.setdefault(key, []).append(k)
    r = np.empty_like(y)
    for idx in cells.values():
        r[idx] = y[idx] - y[idx].mean()
    groups = {}
    for k, key in enumerate(zip(g.tolist(), users.tolist())):
        groups.setdefault(key, []).append(k)
    sizes = {len(v) for v in groups.values()}
    if len(sizes) != 1:
        return 0.0
    m = sizes.pop()
    if m < 2:
        return 0.0
    n_groups = len(set(g.tolist()))
    n_users = len(groups)
    ss_u = sum(len(idx) * r[idx].mean() ** 2 for idx in groups.values())
    df_u = n_users - n_groups
    df_r = df_e - df_u
    if df_u <= 0 or df_r <= 0:
        return 0.0
    ms_u = ss_u / df_u
    ms_r = (ss_e - ss_u) / df_r
    return max((ms_u - ms_r) / m, 0.0)


def oneway_f(samples: Sequence[np.ndarray]):
    """One-way ANOVA ``(F, p)`` over a list of samples."""
    samples = [np.asarray(s, dtype=float) for s in samples]
    k = len(samples)
    N = sum(s.size for s in samples)
    gm = np.concatenate(samples).mean()
    ss_b = sum(s.size * (s.mean() - gm) ** 2 for s in samples)
    ss_w = sum(((s - s.mean()) ** 2).sum() for s in samples)
    if ss_w == 0:
        return float("nan"), 1.0
    F = (ss_b / (k - 1)) / (ss_w / (N - k))
    return float(F), float(sps.f.sf(F, k - 1, N - k))


# ----------------------------------------------------------------------------
# MANOVA

@dataclass(frozen=True)
class ManovaResult:
    wilks_lambda: float
    chi2: float
    df: int
    p: float
    n: int
    n_groups: int


def manova_wilks(records, metrics: Sequence[str], factor: str = "group") -> ManovaResult:
    """One-way MANOVA: Wilks ``det(W)/det(W+B)`` with Bartlett's chi-square p-value."""
    X = np.column_stack([column(records, m).astype(float) for m in metrics])
    labels = column(records, factor)
    levels = _levels(labels)
    if len(levels) < 2:
        raise StatsError("MANOVA needs at least two groups")
    p = X.shape[1]
    N = X.shape[0]
    mean = X.mean(axis=0)
    W = np.zeros((p, p))
    B = np.zeros((p, p))
    for lv in levels:
        Xg = X[labels == lv]
        if Xg.shape[0] <= p:
            raise StatsError("each group needs more observations than metrics")
        d = Xg - Xg.mean(axis=0)
        W += d.T @ d
        e = (Xg.mean(axis=0) - mean)[:, None]
        B += Xg.shape[0] * (e @ e.T)
    sw, ldw = np.linalg.slogdet(W)
    if sw <= 0 or not np.isfinite(ldw) or np.linalg.cond(W) > 1e14:
        raise StatsError("within-group scatter matrix is singular")
    st, ldt = np.linalg.slogdet(W + B)
    lam = float(min(math.exp(ldw - ldt), 1.0))
    g = len(levels)
    chi2 = max(-(N - 1 - 0.5 * (p + g)) * math.log(lam), 0.0) if lam > 0 else float("inf")
    df = p * (g - 1)
    return ManovaResult(lam, chi2, df, float(sps.chi2.sf(chi2, df)), N, g)


def wilks_to_f(result: ManovaResult) -> float:
    """Exact F for a single metric: ``(1 - L)/L * (N - g)/(g - 1)``."""
    L = result.wilks_lambda
    return (1 - L) / L * (result.n - result.n_groups) / (result.n_groups - 1)


# ----------------------------------------------------------------------------
# Bayesian regression

@dataclass(frozen=True)
class BayesPosterior:
    """Normal-inverse-gamma posterior of ``y = X beta + e``, ``e ~ N(0, sigma^2)``."""

    mean: np.ndarray
    covariance: np.ndarray
    credible: np.ndarray  # (k, 2) equal-tailed intervals
    a_n: float
    b_n: float
    V_n: np.ndarray
    names: tuple

    @property
    def sigma_sq_mean(self) -> float:
        return self.b_n / (self.a_n - 1) if self.a_n > 1 else float("inf")


def bayes_regress(X, y, prior_precision: float = 1e-10, a0: float = 1e-3, b0: float = 1e-3,
                  level: float = 0.95, names=None) -> BayesPosterior:
    """Conjugate regression with prior ``beta | sigma^2 ~ N(0, sigma^2 V0)``.

    ``V0^{-1} = prior_precision * diag(X^T X)`` (scale-free); zero gives the flat
    limit whose posterior mean is ordinary least squares. Marginal intervals
    use the Student-t with ``2 a_n`` degrees of freedom.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    n, k = X.shape
    if n < k + 1:
        raise StatsError(f"need at least {k + 1} records")
    if np.linalg.matrix_rank(X) < k:
        raise StatsError("design matrix is rank deficient")
    XtX = X.T @ X
    P0 = prior_precision * np.diag(np.diag(XtX))
    Pn = XtX + P0
    Vn = np.linalg.inv(Pn)
    Vn = 0.5 * (Vn + Vn.T)
    mn = np.linalg.solve(Pn, X.T @ y)
    resid = y - X @ mn
    a_n = a0 + 0.5 * n
    b_n = b0 + 0.5 * (float(resid @ resid) + float(mn @ P0 @ mn))
    scale = b_n / a_n
    dof = 2 * a_n
    half = sps.t.ppf(0.5 + 0.5 * level, dof) * np.sqrt(scale * np.diag(Vn))
    cov = (b_n / (a_n - 1)) * Vn if a_n > 1 else np.full_like(Vn, np.inf)
    names = tuple(names) if names is not None else tuple(f"beta{i}" for i in range(k))
    return BayesPosterior(mn, cov, np.column_stack([mn - half, mn + half]), a_n, b_n, Vn, names)


def bayes_regress_records(records, **kwargs) -> BayesPosterior:
    """``task_error ~ beta0 + beta1 eps_F + beta2 latency``."""
    e = column(records, "eps_F").astype(float)
    lat = column(records, "latency").astype(float)
    X = np.column_stack([np.ones_like(e), e, lat])
    return bayes_regress(X, column(records, "task_error").astype(float),
                         names=("beta0", "beta1", "beta2"), **kwargs)


# ----------------------------------------------------------------------------
# effect sizes

def cohens_d(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    nx, ny = x.size, y.size
    pooled = ((nx - 1) * x.var(ddof=1) + (ny - 1) * y.var(ddof=1)) / (nx + ny - 2)
    if not pooled > 0:
        if x.mean() == y.mean():
            return 0.0
        raise StatsError("zero pooled standard deviation")
    return float((x.mean() - y.mean()) / math.sqrt(pooled))


def partial_eta_sq(ss_effect: float, ss_error: float) -> float:
    tot = ss_effect + ss_error
    return float(ss_effect / tot) if tot > 0 else 0.0


def bootstrap_mean_diff(x, y, n_boot: int = 10000, seed=0, level: float = 0.95):
    """Percentile CI of ``mean(x) - mean(y)`` from independent resampling."""
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    bx = x[rng.integers(0, x.size, (n_boot, x.size))].mean(axis=1)
    by = y[rng.integers(0, y.size, (n_boot, y.size))].mean(axis=1)
    d = bx - by
    q = 0.5 * (1 - level)
    return float(np.quantile(d, q)), float(np.quantile(d, 1 - q)), d


def bootstrap_mean_ci(x, n_boot: int = 10000, seed=0, level: float = 0.95):
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=float)
    m = x[rng.integers(0, x.size, (n_boot, x.size))].mean(axis=1)
    q = 0.5 * (1 - level)
    return float(np.quantile(m, q)), float(np.quantile(m, 1 - q))


def welch_t(x, y):
    """Welch two-sample t-test ``(t, df, p)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    vx, vy = x.var(ddof=1) / x.size, y.var(ddof=1) / y.size
    se2 = vx + vy
    if not se2 > 0:
        return float("nan"), float("nan"), 1.0
    t = (x.mean() - y.mean()) / math.sqrt(se2)
    df = se2 ** 2 / (vx ** 2 / (x.size - 1) + vy ** 2 / (y.size - 1))
    return float(t), float(df), float(2 * sps.t.sf(abs(t), df))


@dataclass(frozen=True)
class EffectStats:
    contrast: tuple
    cohens_d: float
    partial_eta_sq: float
    bootstrap_ci: tuple
    bonferroni_pairwise: dict


def effect_stats(records, metric: str, factor: str, contrast: tuple, n_boot: int = 10000,
                 seed=0) -> EffectStats:
    """Effect of ``factor`` on ``metric`` for the pair ``contrast = (a, b)``.

    Partial eta squared is ``SS_factor / (SS_factor + SS_error)`` from the
    one-way decomposition over all levels of ``factor``; the pairwise Welch
    p-values are multiplied by the number of level pairs (Bonferroni).
    """
    y = column(records, metric).astype(float)
    lab = column(records, factor)
    levels = _levels(lab)
    samples = {lv: y[lab == lv] for lv in levels}
    if any(s.size < 2 for s in samples.values()):
        raise StatsError("need at least two observations per level")
    a, b = contrast
    if a not in samples or b not in samples:
        raise StatsError(f"unknown contrast levels {contrast}")
    d = cohens_d(samples[a], samples[b])
    gm = y.mean()
    ss_b = sum(s.size * (s.mean() - gm) ** 2 for s in samples.values())
    ss_w = sum(((s - s.mean()) ** 2).sum() for s in samples.values())
    lo, hi, _ = bootstrap_mean_diff(samples[a], samples[b], n_boot, seed)
    pairs = list(itertools.combinations(levels, 2))
    pw = {}
    for u, v in pairs:
        t, df, p = welch_t(samples[u], samples[v])
        pw[(u, v)] = min(1.0, p * len(pairs))
    return EffectStats((a, b), d, partial_eta_sq(ss_b, ss_w), (lo, hi), pw)


# ----------------------------------------------------------------------------
# Monte Carlo power

@dataclass(frozen=True)
class PowerResult:
    type1_rate: float
    power: float
    type1_se: float
    power_se: float
    n_replicates: int


def power_mc(effect_config: dict, n_per_cell: int, alpha_level: float = 0.05,
             n_replicates: int = 1000, seed=0) -> PowerResult:
    """Rejection rates of the group F-test in a balanced 3 x 3 design.

    ``effect_config`` keys: ``effect`` (offset of the first group, in residual
    SDs), ``n_groups`` and ``n_tasks`` (default 3 each), ``sd`` (residual SD,
    default 1). Null and alternative populations share the residual draws.
    """
    if n_replicates < 100:
        raise StatsError("n_replicates must be at least 100")
    a = int(effect_config.get("n_groups", 3))
    b = int(effect_config.get("n_tasks", 3))
    sd = float(effect_config.get("sd", 1.0))
    eff = float(effect_config.get("effect", 0.0))
    n = int(n_per_cell)
    rng = np.random.default_rng(seed)
    df_a, df_e = a - 1, a * b * (n - 1)
    crit = sps.f.isf(alpha_level, df_a, df_e)
    rej0 = rej1 = 0
    chunk = max(1, min(n_replicates, 2_000_000 // (a * b * n)))
    done = 0
    while done < n_replicates:
        r = min(chunk, n_replicates - done)
        e = sd * rng.standard_normal((r, a, b, n))
        ss_a, _, _, ss_e = two_way_sums(e)
        rej0 += int(np.sum((ss_a / df_a) / (ss_e / df_e) > crit))
        shifted = e.copy()
        shifted[:, 0] += eff * sd
        ss_a, _, _, ss_e = two_way_sums(shifted)
        rej1 += int(np.sum((ss_a / df_a) / (ss_e / df_e) > crit))
        done += r
    t1 = rej0 / n_replicates
    pw = rej1 / n_replicates
    return PowerResult(t1, pw, math.sqrt(t1 * (1 - t1) / n_replicates),
                       math.sqrt(pw * (1 - pw) / n_replicates), n_replicates)
