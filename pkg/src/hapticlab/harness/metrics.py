"""Force-fidelity and motion-smoothness metrics."""

from __future__ import annotations

import math

import numpy as np


class MetricError(ValueError):
    """Invalid metric input."""


def smoothness_index(velocities, dt: float) -> float:
    """Mean absolute change of the discrete acceleration.

    With ``a_i = (v_{i+1} - v_i)/dt`` this is ``sum_i |a_{i+1} - a_i| / (N - 1)``
    for ``N`` velocity samples, so its unit is m/s^2 (the change is not divided
    by ``dt`` a second time).
    """
    v = np.asarray(velocities, dtype=float)
    if v.ndim != 1 or v.size < 2:
        raise MetricError("need at least two velocity samples")
    acc = np.diff(v) / dt
    return float(np.abs(np.diff(acc)).sum() / (v.size - 1))


def compute_fidelity_metrics(sim_forces, ref_forces, velocities, dt: float) -> dict:
    """MAE, RMS, normalized L2 error ``eps_F`` and both smoothness variants.

    ``smoothness_norm = 1 / (1 + smoothness_raw)`` maps the unbounded index
    into (0, 1], with 1 for constant-velocity motion.
    """
    sim = np.asarray(sim_forces, dtype=float)
    ref = np.asarray(ref_forces, dtype=float)
    if sim.shape != ref.shape or sim.ndim != 1:
        raise MetricError("force series must be 1-D and of equal length")
    if sim.size < 2:
        raise MetricError("need at least two samples")
    if len(velocities) != sim.size:
        raise MetricError("velocities must match the force series length")
    ref_norm = float(np.linalg.norm(ref))
    if ref_norm == 0.0:
        raise MetricError("reference force has zero norm; eps_F undefined")
    err = sim - ref
    s_raw = smoothness_index(velocities, dt)
    return {
        "MAE": float(np.mean(np.abs(err))),
        "RMS": float(np.sqrt(np.mean(err * err))),
        "eps_F": float(np.linalg.norm(err)) / ref_norm,
        "smoothness_raw": s_raw,
        "smoothness_norm": 1.0 / (1.0 + s_raw),
    }


def effective_delay(rendered, reference, dt: float, max_lag: float = 0.05) -> float:
    """Lag (s) of ``rendered`` behind ``reference`` maximizing their cross-correlation.

    Both series are mean-removed; lags within ``+-max_lag`` are scanned with
    the correlation coefficient of the overlapping segments (so a shorter
    overlap cannot win by dropping low-power edges) and the peak is refined by
    a parabola through its neighbours. Negative values mean the rendered force
    leads.
    """
    x = np.asarray(rendered, dtype=float)
    y = np.asarray(reference, dtype=float)
    if x.shape != y.shape or x.size < 3:
        raise MetricError("series must have equal length >= 3")
    x = x - x.mean()
    y = y - y.mean()
    L = min(int(round(max_lag / dt)), x.size - 2)
    lags = np.arange(-L, L + 1)
    n = x.size
    c = np.empty(lags.size)
    for i, l in enumerate(lags):
        a, b = (x[l:], y[:n - l]) if l >= 0 else (x[:n + l], y[-l:])
        den = math.sqrt(float(a @ a) * float(b @ b))
        c[i] = float(a @ b) / den if den > 0 else 0.0
    j = int(np.argmax(c))
    frac = 0.0
    if 0 < j < lags.size - 1:
        den = c[j - 1] - 2 * c[j] + c[j + 1]
        if den < 0:
            frac = 0.5 * (c[j - 1] - c[j + 1]) / den
    return float((lags[j] + frac) * dt)
