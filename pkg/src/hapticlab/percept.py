"""Bayesian psychophysics: Stevens-law observers, Weber thresholds, posterior tracking."""

from __future__ import annotations

import csv
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import optimize, special


_EPS = sys.float_info.epsilon


class PerceptError(ValueError):
    """Invalid psychophysical parameters or inputs."""


def stevens_map(F, alpha: float, beta: float):
    """Perceived intensity ``alpha * F**beta`` for non-negative force ``F``."""
    arr = np.asarray(F, dtype=float)
    if np.any(arr < 0):
        raise PerceptError("Stevens mapping requires non-negative force")
    out = alpha * np.power(arr, beta)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ObserverParams:
    stevens_alpha: float
    stevens_beta: float
    sensory_var: float
    weber_fraction: float

    def __post_init__(self):
        if not self.stevens_alpha > 0:
            raise PerceptError("stevens_alpha must be positive")
        if not self.sensory_var > 0:
            raise PerceptError("sensory_var must be positive")
        if not 0.0 < self.weber_fraction < 1.0:
            raise PerceptError("weber_fraction must lie in (0, 1)")

    def intensity(self, F):
        return stevens_map(F, self.stevens_alpha, self.stevens_beta)

    def discrimination_sd(self, F):
        """Weber-scaled intensity noise ``kappa * |beta| * S(F)``.

        With this noise a force increment of ``kappa * F`` produces a unit
        sensitivity index in a single interval, so Weber's law holds exactly for
        small increments.
        """
        return self.weber_fraction * abs(self.stevens_beta) * self.intensity(F)


@dataclass(frozen=True)
class Hyperpriors:
    """Population hyperparameters (log-normal alpha, normal beta, inverse-gamma
    sensory variance, normal Weber fraction)."""

    mu_alpha: float = 0.0
    tau_alpha: float = 0.25
    mu_beta: float = 1.0
    tau_beta: float = 0.15
    a_sigma: float = 3.0
    b_sigma: float = 0.5
    kappa_mean: float = 0.1
    tau_kappa: float = 0.02

    def __post_init__(self):
        for name in ("tau_alpha", "tau_beta", "b_sigma", "tau_kappa"):
            if not getattr(self, name) > 0:
                raise PerceptError(f"{name} must be positive")
        if not self.a_sigma > 1:
            raise PerceptError("a_sigma must exceed 1")
        if not 0.0 < self.kappa_mean < 1.0:
            raise PerceptError("kappa_mean must lie in (0, 1)")


def _draw_observer(h: Hyperpriors, rng: np.random.Generator) -> ObserverParams:
    z = rng.standard_normal(2)
    alpha = math.exp(h.mu_alpha + h.tau_alpha * z[0])
    beta = h.mu_beta + h.tau_beta * z[1]
    var = h.b_sigma / rng.gamma(h.a_sigma)
    kappa = h.kappa_mean + h.tau_kappa * rng.standard_normal()
    for _ in range(1000):
        if 0.0 < kappa < 1.0:
            break
        kappa = h.kappa_mean + h.tau_kappa * rng.standard_normal()
    else:
        kappa = min(max(h.kappa_mean, 1e-6), 1 - 1e-6)
    return ObserverParams(alpha, beta, var, kappa)


def sample_observer(h: Hyperpriors, seed) -> ObserverParams:
    """Draw one observer; the Weber fraction is truncated to (0, 1) by resampling."""
    return _draw_observer(h, np.random.default_rng(seed))


def sample_population(h: Hyperpriors, n: int = 2048, seed=0) -> list:
    """``n`` observers from one seeded stream (the posterior-predictive sample set)."""
    if n < 1:
        raise PerceptError("population size must be at least 1")
    rng = np.random.default_rng(seed)
    return [_draw_observer(h, rng) for _ in range(n)]


@dataclass(frozen=True)
class GaussianPosterior:
    mu: float
    sigma_sq: float

    def __post_init__(self):
        if not self.sigma_sq > 0:
            raise PerceptError("posterior variance must be positive")


def recursive_update(post: GaussianPosterior, y: float, sigma_f_sq: float,
                     sigma_y_sq: float) -> GaussianPosterior:
    """Gaussian update in the fixed-weight form

    ``mu_t = (sigma_y^2 mu_{t-1} + sigma_f^2 y) / (sigma_y^2 + sigma_f^2)`` and
    ``sigma_t^2 = sigma_y^2 sigma_f^2 / (sigma_y^2 + sigma_f^2)``.

    The previous posterior variance does not enter; the weights are the
    stationary ones set by the two noise variances.
    """
    if not (sigma_f_sq > 0 and sigma_y_sq > 0):
        raise PerceptError("variances must be positive")
    s = sigma_y_sq + sigma_f_sq
    return GaussianPosterior((sigma_y_sq * post.mu + sigma_f_sq * y) / s,
                             sigma_y_sq * sigma_f_sq / s)


@dataclass(frozen=True)
class TissuePrior:
    """Log-normal force prior ``LogNormal(mu_F, tau_F^2)`` plus sensor noise SD."""

    mu_F: float
    tau_F: float
    sigma_mech: float

    def __post_init__(self):
        if not (self.tau_F > 0 and self.sigma_mech > 0):
            raise PerceptError("tau_F and sigma_mech must be positive")


class MapError(RuntimeError):
    """The MAP search failed even after the grid fallback."""


def log_posterior(F, F_obs: float, prior: TissuePrior):
    """Unnormalized log posterior density of ``u = log F`` evaluated at ``F > 0``.

    ``-(F_obs - F)^2 / (2 sigma_mech^2) - (log F - mu_F)^2 / (2 tau_F^2)``. In
    log-force coordinates the prior is Gaussian, so a broad prior is flat and
    the mode tends to ``F_obs``.
    """
    F = np.asarray(F, dtype=float)
    lf = np.log(F)
    return -(F_obs - F) ** 2 / (2 * prior.sigma_mech ** 2) - (lf - prior.mu_F) ** 2 / (2 * prior.tau_F ** 2)


def log_posterior_grad(F: float, F_obs: float, prior: TissuePrior) -> float:
    """Derivative of :func:`log_posterior` with respect to ``u = log F``."""
    return (F_obs - F) * F / prior.sigma_mech ** 2 - (math.log(F) - prior.mu_F) / prior.tau_F ** 2


def _log_posterior_hess(F, F_obs, prior):
    return (F_obs - 2.0 * F) * F / prior.sigma_mech ** 2 - 1.0 / prior.tau_F ** 2


def map_bracket(F_obs: float, prior: TissuePrior):
    """Search interval ``(1e-9, F_obs + 10 sigma_mech)``, widened upward while the
    gradient at the upper end is still positive."""
    lo = 1e-9
    hi = max(F_obs + 10.0 * prior.sigma_mech, 2.0 * lo)
    for _ in range(200):
        if log_posterior_grad(hi, F_obs, prior) < 0:
            break
        hi *= 2.0
    return lo, hi


def _grid_map(F_obs, prior, lo, hi, n=20001):
    grid = np.geomspace(lo, hi, n)
    lp = log_posterior(grid, F_obs, prior)
    i = int(np.argmax(lp))
    a, b = math.log(grid[max(i - 1, 0)]), math.log(grid[min(i + 1, n - 1)])
    res = optimize.minimize_scalar(lambda u: -float(log_posterior(math.exp(u), F_obs, prior)),
                                   bounds=(a, b), method="bounded", options={"xatol": 1e-14})
    return math.exp(res.x)


def map_estimate(F_obs: float, prior: TissuePrior, grad_tol: float = 1e-10) -> float:
    """Posterior mode of the true force under a log-normal prior.

    The mode is taken in log-force coordinates ``u = log F`` (where the prior
    is Gaussian). Safeguarded Newton runs on ``u`` inside :func:`map_bracket`; a
    bisection step replaces any Newton step that leaves the current bracket or
    meets non-negative curvature. A dense log-spaced grid scan is the fallback
    when Newton does not converge.
    """
    if not math.isfinite(F_obs):
        raise PerceptError("F_obs must be finite")
    lo, hi = map_bracket(F_obs, prior)
    a, b = math.log(lo), math.log(hi)
    u = math.log(min(max(F_obs, lo), hi)) if F_obs > lo else 0.5 * (a + b)
    for _ in range(200):
        F = math.exp(u)
        g = log_posterior_grad(F, F_obs, prior)
        if abs(g) <= grad_tol:
            return F
        if g > 0:
            a = u
        else:
            b = u
        h = _log_posterior_hess(F, F_obs, prior)
        u_new = u - g / h if h < 0 else a - 1.0
        if not a < u_new < b:
            u_new = 0.5 * (a + b)
        if abs(u_new - u) <= 4.0 * _EPS * max(1.0, abs(u)):
            return math.exp(u_new)
        u = u_new
    F = _grid_map(F_obs, prior, lo, hi)
    if not (lo <= F <= hi and math.isfinite(F)):
        raise MapError("MAP search failed; the prior is pathological for this observation")
    return F


@dataclass(frozen=True)
class PerceptResult:
    mean_intensity: float
    var_intensity: float


def _param_arrays(samples):
    if len(samples) == 0:
        raise PerceptError("posterior sample list is empty")
    alpha = np.fromiter((s.stevens_alpha for s in samples), float, len(samples))
    beta = np.fromiter((s.stevens_beta for s in samples), float, len(samples))
    return alpha, beta


def perceived_force(F_filt: float, posterior_samples: Sequence[ObserverParams]) -> PerceptResult:
    """Monte Carlo mean and variance (population form) of ``alpha_j F**beta_j``."""
    if F_filt < 0:
        raise PerceptError("force must be non-negative")
    alpha, beta = _param_arrays(posterior_samples)
    S = alpha * np.power(float(F_filt), beta)
    mean = float(S.mean())
    return PerceptResult(mean, float(np.mean((S - mean) ** 2)))


def weber_deadband(F_prev: float, F_new: float, kappa: float) -> float:
    """Hold ``F_prev`` when the change is below ``kappa * |F_prev|``."""
    if not 0.0 < kappa < 1.0:
        raise PerceptError("kappa must lie in (0, 1)")
    if F_prev == 0.0:
        return F_new
    return F_prev if abs(F_new - F_prev) < kappa * abs(F_prev) else F_new


@dataclass(frozen=True)
class PsychometricTable:
    base_force: float
    deltas: np.ndarray
    n: np.ndarray
    n_correct: np.ndarray

    @property
    def p_hat(self) -> np.ndarray:
        return self.n_correct / self.n


@dataclass(frozen=True)
class PsychometricFit:
    """Cumulative-Gaussian 2AFC fit ``P(delta) = Phi(delta / (sqrt(2) s))``.

    ``jnd`` is ``s``, the increment giving unit sensitivity in one interval;
    ``weber_fraction`` is ``s / base_force``.
    """

    jnd: float
    weber_fraction: float
    neg_log_likelihood: float


def simulate_jnd_experiment(base_force: float, deltas, observer: ObserverParams,
                            n_trials_per_delta: int, seed=0,
                            include_sensory_noise: bool = False) -> PsychometricTable:
    """Two-interval forced-choice discrimination of ``base_force`` vs ``base_force + delta``.

    Each interval yields the Stevens intensity plus Gaussian noise with the
    observer's Weber-scaled SD (:meth:`ObserverParams.discrimination_sd`);
    optionally the additive sensory variance is included as well. The
    observer picks the interval with the larger percept.
    """
    if not base_force > 0:
        raise PerceptError("base_force must be positive")
    if n_trials_per_delta < 1:
        raise PerceptError("n_trials_per_delta must be at least 1")
    deltas = np.asarray(deltas, dtype=float)
    rng = np.random.default_rng(seed)
    extra = observer.sensory_var if include_sensory_noise else 0.0
    counts = np.empty(len(deltas), dtype=np.int64)
    for i, d in enumerate(deltas):
        f_cmp = base_force + d
        if f_cmp < 0:
            raise PerceptError("comparison force must be non-negative")
        s_ref, s_cmp = observer.intensity(base_force), observer.intensity(f_cmp)
        sd_ref = math.sqrt(observer.discrimination_sd(base_force) ** 2 + extra)
        sd_cmp = math.sqrt(observer.discrimination_sd(f_cmp) ** 2 + extra)
        z = rng.standard_normal((n_trials_per_delta, 2))
        ref = s_ref + sd_ref * z[:, 0]
        cmp_ = s_cmp + sd_cmp * z[:, 1]
        # a tie (zero-probability) counts as a guess resolved by a fair coin
        ties = cmp_ == ref
        correct = (cmp_ > ref) | (ties & (rng.random(n_trials_per_delta) < 0.5))
        counts[i] = int(correct.sum())
    return PsychometricTable(float(base_force), deltas,
                             np.full(len(deltas), n_trials_per_delta, dtype=np.int64), counts)


def fit_psychometric(table: PsychometricTable) -> PsychometricFit:
    """Maximum-likelihood fit of the 2AFC cumulative-Gaussian scale."""
    d = np.asarray(table.deltas, dtype=float)
    k = np.asarray(table.n_correct, dtype=float)
    n = np.asarray(table.n, dtype=float)
    F = table.base_force

    def nll(log_s):
        p = special.ndtr(d / (math.sqrt(2.0) * math.exp(log_s)))
        p = np.clip(p, 1e-12, 1 - 1e-12)
        return -float(np.sum(k * np.log(p) + (n - k) * np.log1p(-p)))

    lo, hi = math.log(1e-6 * F), math.log(10.0 * F)
    grid = np.linspace(lo, hi, 401)
    vals = [nll(g) for g in grid]
    i = int(np.argmin(vals))
    res = optimize.minimize_scalar(nll, bounds=(grid[max(i - 1, 0)], grid[min(i + 1, 400)]),
                                   method="bounded", options={"xatol": 1e-10})
    s = math.exp(res.x)
    return PsychometricFit(s, s / F, float(res.fun))


def write_psychometric_csv(table: PsychometricTable, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["delta", "n", "n_correct", "p_hat"])
        for d, n, k, p in zip(table.deltas, table.n, table.n_correct, table.p_hat):
            w.writerow([f"{d:.9g}", int(n), int(k), f"{p:.9g}"])


def save_population(observers: Sequence[ObserverParams], path) -> None:
    lines = ["observer-population 1", f"count {len(observers)}",
             "stevens_alpha stevens_beta sensory_var weber_fraction"]
    lines += [f"{o.stevens_alpha:.17g} {o.stevens_beta:.17g} {o.sensory_var:.17g} {o.weber_fraction:.17g}"
              for o in observers]
    Path(path).write_text("\n".join(lines) + "\n")


def load_population(path) -> list:
    rows = Path(path).read_text().split("\n")
    if not rows[0].startswith("observer-population"):
        raise PerceptError("not an observer population file")
    n = int(rows[1].split()[1])
    return [ObserverParams(*(float(v) for v in rows[3 + i].split())) for i in range(n)]


class PerceptualShaper:
    """Force shaping stage: recursive Gaussian smoothing, MAP projection, Weber deadband.

    Parameters
    ----------
    sigma_f, sigma_y : float
        Process and measurement SDs (N) of the fixed-weight recursive update.
    prior : TissuePrior, optional
        When given, force magnitudes above ``map_threshold`` are replaced by
        their MAP estimate.
    deadband : float, optional
        Relative deadband threshold; ``None`` disables it.
    """

    def __init__(self, sigma_f: float, sigma_y: float, prior: TissuePrior = None,
                 deadband: float = None, map_threshold: float = 0.0):
        if not (sigma_f > 0 and sigma_y > 0):
            raise PerceptError("sigma_f and sigma_y must be positive")
        self.sigma_f_sq = sigma_f ** 2
        self.sigma_y_sq = sigma_y ** 2
        self.prior = prior
        self.deadband = deadband
        self.map_threshold = map_threshold
        self.reset()

    @property
    def lag_ticks(self) -> float:
        """Mean lag of the smoothing stage in ticks, ``sigma_y^2 / sigma_f^2``."""
        return self.sigma_y_sq / self.sigma_f_sq

    def reset(self):
        s = self.sigma_y_sq + self.sigma_f_sq
        # fixed weights of recursive_update, hoisted out of the per-tick call
        self._w_prev = self.sigma_y_sq / s
        self._w_obs = self.sigma_f_sq / s
        self._var = self.sigma_y_sq * self.sigma_f_sq / s
        self._mu = 0.0
        self._first = True
        self.previous = 0.0

    @property
    def posterior(self) -> GaussianPosterior:
        return GaussianPosterior(self._mu, self._var if not self._first else self.sigma_y_sq)

    def __call__(self, F: float) -> float:
        self._mu = self._w_prev * self._mu + self._w_obs * F
        self._first = False
        value = self._mu
        if self.prior is not None and abs(value) > self.map_threshold:
            value = math.copysign(map_estimate(abs(value), self.prior), value)
        if self.deadband is not None:
            value = weber_deadband(self.previous, value, self.deadband)
            self.previous = value
        return value
