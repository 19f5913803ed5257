import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hapticlab.harness.metrics import (MetricError, compute_fidelity_metrics, effective_delay,
                                       smoothness_index)


def test_identical_series():
    m = compute_fidelity_metrics([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [0.1, 0.1, 0.1], 1e-3)
    assert m["MAE"] == m["RMS"] == m["eps_F"] == 0.0
    assert m["smoothness_raw"] == 0.0 and m["smoothness_norm"] == 1.0


def test_eps_hand_value():
    m = compute_fidelity_metrics([1.0, 2.0], [1.0, 1.0], [0.0, 0.0], 1e-3)
    assert m["eps_F"] == pytest.approx(1 / math.sqrt(2), rel=1e-15)


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=50), st.floats(-5, 5))
def test_constant_offset(ref, c):
    ref = np.asarray(ref) + 20.0  # keep the norm away from zero
    m = compute_fidelity_metrics(ref + c, ref, np.zeros(ref.size), 1e-3)
    assert m["MAE"] == pytest.approx(abs(c), rel=1e-9, abs=1e-12)
    assert m["RMS"] == pytest.approx(abs(c), rel=1e-9, abs=1e-12)


def test_smoothness_hand_value():
    # a = [1, 3, 2] / dt, |da| = [2, 1] / dt, divided by N - 1 = 3
    v = [0.0, 1.0, 4.0, 6.0]
    assert smoothness_index(v, 0.5) == pytest.approx((2 + 1) / 0.5 / 3)
    assert smoothness_index([0.0, 1.0, 2.0, 3.0], 1e-3) == 0.0


@given(st.lists(st.floats(-10, 10), min_size=3, max_size=40))
def test_smoothness_norm_in_unit_interval(v):
    m = compute_fidelity_metrics(np.ones(len(v)), np.ones(len(v)), v, 1e-3)
    assert 0.0 < m["smoothness_norm"] <= 1.0


def test_errors():
    with pytest.raises(MetricError):
        compute_fidelity_metrics([1.0, 2.0], [0.0, 0.0], [0, 0], 1e-3)
    with pytest.raises(MetricError):
        compute_fidelity_metrics([1.0], [1.0], [0.0], 1e-3)
    with pytest.raises(MetricError):
        compute_fidelity_metrics([1.0, 2.0], [1.0, 2.0, 3.0], [0, 0], 1e-3)
    with pytest.raises(MetricError):
        smoothness_index([1.0], 1e-3)


@pytest.mark.parametrize("shift", [0, 3, 7, -4])
def test_effective_delay_integer_shift(shift):
    t = np.arange(2000) * 1e-3
    ref = np.sin(2 * np.pi * 1.3 * t) + 0.3 * np.sin(2 * np.pi * 4.1 * t)
    rendered = np.roll(ref, shift)
    assert effective_delay(rendered, ref, 1e-3) == pytest.approx(shift * 1e-3, abs=2e-4)
