import numpy as np
import pytest
from hypothesis import given, strategies as st

from hapticlab.dynamics import LinearPlant, Trajectory, make_task_model, simulate_trajectory
from hapticlab.koopman import (Dictionary, KoopmanError, KoopmanModel, fit_edmd, lift, load_model,
                               predict_lifted, save_model, verify_error_order)


def _scalar_traj(a, b, n=60, seed=0):
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(n)
    x = np.empty(n)
    x[0] = 1.0
    for k in range(n - 1):
        x[k + 1] = a * x[k] + b * u[k]
    return Trajectory(np.arange(n) * 1e-3, x[:, None], u, x[:, None])


def test_lift_examples():
    assert np.array_equal(lift(3.0, Dictionary(((1,), (2,)))), [3.0, 9.0])
    d = Dictionary.polynomial(3, 3, constant=False)
    assert np.array_equal(lift(np.zeros(3), d), np.zeros(d.dimension))
    assert np.array_equal(lift([1.0, 2.0], Dictionary.identity(2)), [1.0, 2.0])


def test_dictionary_validation():
    with pytest.raises(KoopmanError):
        Dictionary(((1, 0), (1, 0), (0, 1)))
    with pytest.raises(KoopmanError):
        Dictionary(((2, 0), (0, 1)))  # identity of coordinate 0 missing
    with pytest.raises(KoopmanError):
        lift([1.0, 2.0, 3.0], Dictionary.identity(2))


_finite = st.floats(-1e3, 1e3, allow_subnormal=False)


@given(st.lists(_finite, min_size=3, max_size=3))
def test_projection_recovers_state_exactly(x):
    d = Dictionary.polynomial(3, 2)
    assert np.array_equal(d.project(d.lift(x)), x)


@given(st.lists(_finite, min_size=3, max_size=3),
       st.lists(st.integers(-20, 20), min_size=3, max_size=3))
def test_projection_exact_with_power_of_two_scales(x, exps):
    d = Dictionary.polynomial(3, 2, scales=[2.0 ** e for e in exps])
    assert np.array_equal(d.project(d.lift(x)), x)


@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_fast_lift_equals_vectorized(x):
    d = Dictionary.polynomial(3, 2, scales=(0.5, 2.0, 0.25))
    assert d.lift_fast(x) == d.lift_many(np.array([x]))[0].tolist()


def test_polynomial_dictionary_size():
    # monomials of degree <= 2 in 3 variables: C(5, 2) = 10
    assert Dictionary.polynomial(3, 2).dimension == 10


def test_fit_recovers_scalar_operator_and_input_gain():
    tr = _scalar_traj(0.9, 0.1)
    m = fit_edmd([tr], Dictionary.identity(1), ridge_lambda=0.0)
    assert abs(m.K[0, 0] - 0.9) <= 1e-8
    assert abs(m.B[0, 0] - 0.1) <= 1e-8
    assert m.fit_residual <= 1e-10


def test_fit_rank_deficient_without_ridge():
    n = 30
    x = np.ones((n, 1))
    tr = Trajectory(np.arange(n) * 1e-3, x, np.ones(n), x)
    with pytest.raises(KoopmanError, match="increase data or lambda"):
        fit_edmd([tr], Dictionary.identity(1), ridge_lambda=0.0)


def test_fit_needs_enough_pairs():
    tr = _scalar_traj(0.9, 0.1, n=2)
    with pytest.raises(KoopmanError):
        fit_edmd([tr], Dictionary.polynomial(1, 3))


def test_ridge_shrinkage_monotone():
    tr = _scalar_traj(0.95, 0.2, n=200, seed=1)
    d = Dictionary.polynomial(1, 3)
    norms = []
    for lam in (0.0, 1e-3, 1e-1, 1e1, 1e3, 1e6, 1e9):
        m = fit_edmd([tr], d, ridge_lambda=lam)
        norms.append(np.linalg.norm(np.hstack([m.K, m.B])))
    assert all(a >= b - 1e-12 for a, b in zip(norms, norms[1:]))
    assert norms[-1] < 1e-3


def test_exact_linear_plant_recovery():
    plant = LinearPlant()
    Ad, Bd = plant.discrete(1e-3)
    rng = np.random.default_rng(4)
    trajs = [simulate_trajectory(plant, rng.standard_normal(81), 0.08, 1e-3, seed=0,
                                 x0=rng.standard_normal(3)) for _ in range(5)]
    m = fit_edmd(trajs, Dictionary.identity(3), ridge_lambda=0.0)
    assert np.linalg.norm(m.K - Ad) <= 1e-8
    assert np.linalg.norm(m.B[:, 0] - Bd) <= 1e-8
    assert m.fit_residual <= 1e-10


def test_predict_examples():
    d = Dictionary.identity(1)
    m = KoopmanModel(np.array([[0.5]]), np.zeros((1, 1)), d, 0.0, 0.0, 1e-3)
    out = predict_lifted(m, np.array([1.0]), None, 3)
    assert out[3, 0] == 0.125
    assert np.array_equal(out[0], [1.0])
    eye = KoopmanModel(np.eye(3), np.zeros((3, 1)), Dictionary.identity(3), 0.0, 0.0, 1e-3)
    phi = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(predict_lifted(eye, phi, None, 4), np.tile(phi, (5, 1)))
    with pytest.raises(KoopmanError):
        predict_lifted(m, np.array([1.0]), None, -1)
    with pytest.raises(KoopmanError):
        predict_lifted(m, np.array([1.0, 2.0]), None, 1)


@given(st.integers(0, 2 ** 31))
def test_predict_semigroup_and_convolution(seed):
    rng = np.random.default_rng(seed)
    N = 4
    K = rng.standard_normal((N, N))
    K *= 0.9 / max(abs(np.linalg.eigvals(K)))
    B = rng.standard_normal((N, 1))
    m = KoopmanModel(K, B, Dictionary.identity(N), 0.0, 0.0, 1e-3)
    phi0 = rng.standard_normal(N)
    u = rng.standard_normal(5)
    out = predict_lifted(m, phi0, u, 5)
    phi = phi0.copy()
    for k in range(5):
        phi = m.one_step(phi, u[k])
    assert np.allclose(out[5], phi, rtol=1e-12, atol=1e-12)
    # closed form K^n phi0 + sum K^{n-1-j} B u_j
    closed = np.linalg.matrix_power(K, 5) @ phi0 + sum(
        np.linalg.matrix_power(K, 4 - j) @ B[:, 0] * u[j] for j in range(5))
    assert np.allclose(out[5], closed, rtol=1e-10, atol=1e-12)
    Kh, G = m.horizon_operators(3)
    assert np.allclose(Kh @ phi0 + G[:, 0] * 0.7, predict_lifted(m, phi0, np.full(3, 0.7), 3)[3])


def test_model_save_load_roundtrip(tmp_path):
    tr = _scalar_traj(0.9, 0.1, n=100)
    m = fit_edmd([tr], Dictionary.polynomial(1, 2, scales=(0.5,)))
    save_model(m, tmp_path / "m.txt")
    back = load_model(tmp_path / "m.txt")
    assert np.array_equal(back.K, m.K) and np.array_equal(back.B, m.B)
    assert back.dictionary == m.dictionary
    assert back.dt == m.dt and back.ridge_lambda == m.ridge_lambda


def test_continuous_operator_of_exact_fit():
    plant = LinearPlant()
    rng = np.random.default_rng(0)
    trajs = [simulate_trajectory(plant, rng.standard_normal(41), 0.04, 1e-3, seed=0,
                                 x0=rng.standard_normal(3)) for _ in range(4)]
    m = fit_edmd(trajs, Dictionary.identity(3), ridge_lambda=0.0)
    assert np.allclose(m.continuous_operator(), np.array(plant.A), atol=1e-5)


def test_error_order_exact_regime_on_linear_plant():
    d = Dictionary.identity(3)
    r = verify_error_order(LinearPlant(), 1e-3, lambda tr: fit_edmd(tr, d, 0.0),
                           state_scales=(1, 1, 1), operating_force=0.1, n_test=50, substeps=10)
    assert r.regime == "exact"
