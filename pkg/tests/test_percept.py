import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hapticlab.percept import (GaussianPosterior, Hyperpriors, ObserverParams, PerceptError,
                               PerceptualShaper, TissuePrior, fit_psychometric, load_population,
                               log_posterior_grad, map_bracket, map_estimate, perceived_force,
                               recursive_update, sample_observer, sample_population, save_population,
                               simulate_jnd_experiment, stevens_map, weber_deadband)

_pos = st.floats(1e-3, 1e3)


def test_stevens_examples():
    assert stevens_map(7.0, 1.0, 1.0) == 7.0
    assert stevens_map(4.0, 1.0, 0.5) == 2.0
    assert stevens_map(0.0, 2.0, 0.8) == 0.0
    assert np.allclose(stevens_map(np.array([1.0, 4.0]), 3.0, 0.5), [3.0, 6.0])
    with pytest.raises(PerceptError):
        stevens_map(-1.0, 1.0, 1.0)


def test_observer_validation():
    with pytest.raises(PerceptError):
        ObserverParams(0.0, 1.0, 1.0, 0.1)
    with pytest.raises(PerceptError):
        ObserverParams(1.0, 1.0, 0.0, 0.1)
    with pytest.raises(PerceptError):
        ObserverParams(1.0, 1.0, 1.0, 1.0)
    with pytest.raises(PerceptError):
        Hyperpriors(a_sigma=1.0)


def test_degenerate_priors_give_location():
    h = Hyperpriors(mu_alpha=0.3, tau_alpha=1e-300, mu_beta=0.7, tau_beta=1e-300)
    o = sample_observer(h, 5)
    assert o.stevens_alpha == math.exp(0.3)
    assert o.stevens_beta == 0.7


def test_same_seed_same_observer():
    h = Hyperpriors()
    assert sample_observer(h, 42) == sample_observer(h, 42)
    assert sample_observer(h, 42) != sample_observer(h, 43)


def test_log_alpha_mean_within_three_standard_errors():
    h = Hyperpriors(mu_alpha=0.2, tau_alpha=0.3)
    la = np.log([o.stevens_alpha for o in sample_population(h, 10_000, seed=1)])
    se = h.tau_alpha / math.sqrt(la.size)
    assert abs(la.mean() - h.mu_alpha) <= 3 * se
    kappas = [o.weber_fraction for o in sample_population(Hyperpriors(kappa_mean=0.05, tau_kappa=0.1), 500, 2)]
    assert all(0 < k < 1 for k in kappas)


def test_recursive_update_examples():
    p = recursive_update(GaussianPosterior(1.0, 9.0), 3.0, 0.5, 0.5)
    assert p.mu == 2.0 and p.sigma_sq == 0.25
    assert recursive_update(GaussianPosterior(0.0, 1.0), 4.0, 2.0, 2.0).sigma_sq == 1.0
    p = recursive_update(GaussianPosterior(1.5, 1.0), 100.0, 1e-14, 1.0)
    assert p.mu == pytest.approx(1.5, abs=1e-10) and p.sigma_sq <= 1e-14
    with pytest.raises(PerceptError):
        recursive_update(GaussianPosterior(0.0, 1.0), 1.0, 0.0, 1.0)


@given(_pos, _pos, st.floats(-10, 10), st.floats(-10, 10))
def test_recursive_variance_below_both_inputs(sf, sy, mu, y):
    p = recursive_update(GaussianPosterior(mu, 1.0), y, sf, sy)
    assert p.sigma_sq < sf and p.sigma_sq < sy
    assert min(mu, y) - 1e-9 <= p.mu <= max(mu, y) + 1e-9


def test_map_flat_prior_and_sharp_likelihood():
    assert map_estimate(2.0, TissuePrior(0.0, 1e6, 0.5)) == pytest.approx(2.0, rel=1e-6)
    assert map_estimate(2.0, TissuePrior(3.0, 0.5, 1e-6)) == pytest.approx(2.0, rel=1e-6)


def test_map_matches_dense_grid():
    prior = TissuePrior(0.0, 0.5, 0.5)
    # independent scan of the log-force posterior on 10^6 points over (0, 10]
    F = np.linspace(10 / 1e6, 10.0, 1_000_000)
    lp = -(2.0 - F) ** 2 / (2 * 0.25) - np.log(F) ** 2 / (2 * 0.25)
    assert abs(map_estimate(2.0, prior) - F[np.argmax(lp)]) <= 1e-4


@given(st.floats(-5, 50), st.floats(-2, 3), st.floats(0.05, 3), st.floats(0.01, 5))
def test_map_stationary_and_in_bracket(F_obs, mu, tau, sigma):
    prior = TissuePrior(mu, tau, sigma)
    F = map_estimate(F_obs, prior)
    lo, hi = map_bracket(F_obs, prior)
    assert lo <= F <= hi and F > 0
    assert abs(log_posterior_grad(F, F_obs, prior)) <= 1e-8


def test_map_rejects_nonfinite():
    with pytest.raises(PerceptError):
        map_estimate(float("nan"), TissuePrior(0.0, 1.0, 1.0))


def test_perceived_force_examples():
    r = perceived_force(3.0, [ObserverParams(1.0, 1.0, 1.0, 0.1)])
    assert r.mean_intensity == 3.0 and r.var_intensity == 0.0
    with pytest.raises(PerceptError):
        perceived_force(1.0, [])
    with pytest.raises(PerceptError):
        perceived_force(-1.0, [ObserverParams(1.0, 1.0, 1.0, 0.1)])


def test_perceived_force_lognormal_moment():
    h = Hyperpriors(mu_alpha=0.1, tau_alpha=0.4, mu_beta=0.8, tau_beta=1e-300)
    pop = sample_population(h, 20_000, seed=3)
    F = 2.5
    r = perceived_force(F, pop)
    exact = math.exp(h.mu_alpha + h.tau_alpha ** 2 / 2) * F ** 0.8
    assert abs(r.mean_intensity - exact) <= 3 * math.sqrt(r.var_intensity / len(pop))


@given(st.floats(0, 50), st.floats(0, 50), st.integers(0, 2 ** 32 - 1))
def test_perceived_force_monotone(F1, F2, seed):
    pop = sample_population(Hyperpriors(tau_beta=0.05), 64, seed=seed)
    pop = [o for o in pop if o.stevens_beta >= 0]
    lo, hi = sorted((F1, F2))
    assert perceived_force(hi, pop).mean_intensity >= perceived_force(lo, pop).mean_intensity


def test_deadband_examples():
    assert weber_deadband(1.0, 1.05, 0.1) == 1.0
    assert weber_deadband(1.0, 1.2, 0.1) == 1.2
    assert weber_deadband(0.0, 0.3, 0.1) == 0.3
    with pytest.raises(PerceptError):
        weber_deadband(1.0, 1.2, 0.0)


@given(st.floats(-100, 100), st.floats(-100, 100), st.floats(0.01, 0.99))
def test_deadband_idempotent(prev, new, kappa):
    once = weber_deadband(prev, new, kappa)
    assert weber_deadband(prev, once, kappa) == once


@given(st.floats(0.5, 20), st.integers(1, 8), st.floats(0.02, 0.5), st.data())
def test_sub_jnd_noise_invisible(F0, n_levels, kappa, data):
    # staircase with steps above the JND; each hold is perturbed after its first tick
    levels = F0 * (1 + 2 * kappa) ** np.arange(n_levels)
    base = np.repeat(levels, 6)
    noise = np.array([data.draw(st.floats(-0.499, 0.499)) for _ in base]) * kappa * base
    noise[::6] = 0.0

    def run(seq):
        out, prev = [], 0.0
        for f in seq:
            prev = weber_deadband(prev, f, kappa)
            out.append(prev)
        return out

    assert run(base + noise) == run(base) == list(base)


def test_jnd_chance_and_ceiling():
    obs = ObserverParams(1.0, 1.0, 1e-3, 0.1)
    n = 4000
    t = simulate_jnd_experiment(1.0, [0.0, 10 * 0.1], obs, n, seed=0)
    assert abs(t.p_hat[0] - 0.5) <= 3 * math.sqrt(0.25 / n)
    assert t.p_hat[1] >= 0.99
    with pytest.raises(PerceptError):
        simulate_jnd_experiment(0.0, [0.1], obs, 10)


def test_jnd_recovery():
    obs = ObserverParams(1.0, 1.0, 1e-3, 0.1)
    t = simulate_jnd_experiment(1.0, 0.1 * np.array([0.25, 0.5, 1, 1.5, 2, 3]), obs, 1000, seed=11)
    fit = fit_psychometric(t)
    assert abs(fit.weber_fraction / 0.1 - 1) <= 0.2


def test_population_roundtrip(tmp_path):
    pop = sample_population(Hyperpriors(), 10, seed=4)
    save_population(pop, tmp_path / "pop.txt")
    assert load_population(tmp_path / "pop.txt") == pop
    (tmp_path / "bad.txt").write_text("nonsense\n")
    with pytest.raises(PerceptError):
        load_population(tmp_path / "bad.txt")


def test_shaper_equal_weights_and_deadband():
    sh = PerceptualShaper(1.0, 1.0)
    assert sh.lag_ticks == 1.0
    assert sh(2.0) == 1.0 and sh(2.0) == 1.5
    sh = PerceptualShaper(1e3, 1e-3, deadband=0.1)
    assert [round(sh(f), 6) for f in (1.0, 1.05, 1.2)] == [1.0, 1.0, 1.2]
