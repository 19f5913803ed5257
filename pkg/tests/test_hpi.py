import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hapticlab.harness.hpi import HpiError, hpi, hpi_from_records, normalize, pca_weights


def test_identical_trials_fall_back_to_equal_weights():
    res = hpi(np.tile([0.1, 0.002, 0.9, 1e-4], (8, 1)), n_boot=10)
    assert res.equal_weight_fallback
    assert np.array_equal(res.weights, np.full(4, 0.25))
    assert np.allclose(res.scores, 0.5)


@settings(max_examples=40)
@given(st.integers(0, 2 ** 32 - 1), st.integers(5, 60))
def test_weights_simplex_and_scores_in_unit_interval(seed, n):
    M = np.random.default_rng(seed).standard_normal((n, 4))
    res = hpi(M, n_boot=10)
    assert res.weights.sum() == pytest.approx(1.0, abs=1e-12) and np.all(res.weights >= 0)
    assert np.all(res.scores >= -1e-12) and np.all(res.scores <= 1 + 1e-12)


@settings(max_examples=40)
@given(st.integers(0, 2 ** 32 - 1), st.integers(0, 3), st.floats(1e-3, 1e3), st.floats(-1e3, 1e3))
def test_positive_affine_column_rescale_invariance(seed, col, a, b):
    M = np.random.default_rng(seed).standard_normal((30, 4))
    M2 = M.copy()
    M2[:, col] = a * M2[:, col] + b
    s1, s2 = hpi(M, n_boot=10).scores, hpi(M2, n_boot=10).scores
    assert np.allclose(s1, s2, atol=1e-9)


def test_orientation_flips_error_columns():
    M = np.array([[0.0], [1.0], [2.0], [3.0], [4.0]])
    assert np.allclose(normalize(M, [-1.0])[:, 0], [1.0, 0.75, 0.5, 0.25, 0.0])
    assert np.allclose(normalize(np.ones((5, 1)), [1.0]), 0.5)


def test_pca_weights_follow_dominant_direction():
    rng = np.random.default_rng(0)
    z = rng.standard_normal(500)
    Z = np.column_stack([z, 0.01 * rng.standard_normal(500), z, 0.01 * rng.standard_normal(500)])
    w, fb = pca_weights(Z)
    assert not fb and w[0] == pytest.approx(0.5, abs=0.02) and w[1] < 0.02


def test_uniformly_better_condition_wins():
    rng = np.random.default_rng(1)
    n = 60
    good = np.column_stack([rng.uniform(0.0, 0.4, n), rng.uniform(0, 2e-3, n),
                            rng.uniform(0.6, 1.0, n), rng.uniform(0, 2e-4, n)])
    bad = np.column_stack([rng.uniform(0.3, 0.9, n), rng.uniform(1e-3, 4e-3, n),
                           rng.uniform(0.3, 0.8, n), rng.uniform(1e-4, 5e-4, n)])
    res = hpi(np.vstack([good, bad]), labels=["A"] * n + ["B"] * n, n_boot=2000, seed=3)
    assert res.condition_scores["A"] > res.condition_scores["B"]
    assert res.gap_probability("A", "B") > 0.99
    assert res.gap_probability("B", "A") < 0.01


def test_errors():
    with pytest.raises(HpiError):
        hpi(np.ones((4, 4)))
    with pytest.raises(HpiError):
        hpi(np.ones(10))
    with pytest.raises(HpiError):
        hpi(np.ones((6, 3)))


def test_from_records_uses_latency_magnitude():
    recs = [{"eps_F": 0.1 * k, "latency": (-1) ** k * 1e-3 * k, "smoothness_norm": 0.5,
             "task_error": 1e-4} for k in range(6)]
    a = hpi_from_records(recs, ["x"] * 6, n_boot=10)
    for r in recs:
        r["latency"] = abs(r["latency"])
    b = hpi_from_records(recs, ["x"] * 6, n_boot=10)
    assert np.array_equal(a.scores, b.scores)
