"""Composite haptic performance index with PCA-calibrated weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# column name -> +1 if larger is better, -1 if smaller is better
HPI_METRICS = (
    ("eps_F", -1.0),
    ("latency", -1.0),
    ("smoothness_norm", 1.0),
    ("task_error", -1.0),
)


class HpiError(ValueError):
    """Invalid metric matrix."""


@dataclass(frozen=True)
class HpiResult:
    weights: np.ndarray
    scores: np.ndarray  # per trial, in [0, 1]
    condition_scores: dict
    gap_samples: dict  # (a, b) -> bootstrap samples of mean(a) - mean(b)
    equal_weight_fallback: bool

    def gap_probability(self, a, b) -> float:
        return float(np.mean(self.gap_samples[(a, b)] > 0))


def normalize(matrix, orientation) -> np.ndarray:
    """Orient columns so larger is better, then min-max scale each into [0, 1].

    A constant column maps to 0.5.
    """
    M = np.asarray(matrix, dtype=float) * np.asarray(orientation, dtype=float)
    lo = M.min(axis=0)
    span = M.max(axis=0) - lo
    out = np.full_like(M, 0.5)
    ok = span > 0
    out[:, ok] = (M[:, ok] - lo[ok]) / span[ok]
    return out


def pca_weights(normalized: np.ndarray):
    """Absolute first-component loadings of the covariance, summing to one.

    Returns ``(weights, fallback)``; ``fallback`` is true when the covariance
    is degenerate and equal weights are used instead.
    """
    k = normalized.shape[1]
    C = np.cov(normalized, rowvar=False)
    C = np.atleast_2d(C)
    if not np.all(np.isfinite(C)) or np.trace(C) <= 1e-15:
        return np.full(k, 1.0 / k), True
    vals, vecs = np.linalg.eigh(C)
    w = np.abs(vecs[:, -1])
    return w / w.sum(), False


def hpi(matrix, orientation=None, labels=None, n_boot: int = 10000, seed=0) -> HpiResult:
    """Per-trial HPI and per-condition means with bootstrap gaps.

    ``matrix`` is trials x metrics; ``orientation`` holds +-1 per column
    (default: the signs in ``HPI_METRICS``). ``labels`` assign trials to
    conditions; gaps are bootstrapped for every ordered pair of conditions by
    resampling trials within each condition.
    """
    M = np.asarray(matrix, dtype=float)
    if M.ndim != 2:
        raise HpiError("metric matrix must be 2-D")
    n, k = M.shape
    if n < k or n < 5:
        raise HpiError("need at least five trials and no fewer trials than metrics")
    if orientation is None:
        orientation = [s for _, s in HPI_METRICS]
    if len(orientation) != k:
        raise HpiError("orientation length must match the metric count")
    Z = normalize(M, orientation)
    w, fallback = pca_weights(Z)
    scores = Z @ w
    cond, gaps = {}, {}
    if labels is not None:
        labels = np.asarray(labels)
        levels = sorted(set(labels.tolist()), key=str)
        groups = {lv: scores[labels == lv] for lv in levels}
        cond = {lv: float(g.mean()) for lv, g in groups.items()}
        rng = np.random.default_rng(seed)
        boot = {lv: g[rng.integers(0, g.size, (n_boot, g.size))].mean(axis=1)
                for lv, g in groups.items()}
        for a in levels:
            for b in levels:
                if a != b:
                    gaps[(a, b)] = boot[a] - boot[b]
    return HpiResult(w, scores, cond, gaps, fallback)


def hpi_from_records(records, conditions, n_boot: int = 10000, seed=0) -> HpiResult:
    """HPI over records of several conditions, labelled by ``conditions``."""
    from .stats import column

    M = np.column_stack([column(records, name).astype(float) for name, _ in HPI_METRICS])
    # latency may be negative (rendered force leading); its magnitude is the cost
    M[:, 1] = np.abs(M[:, 1])
    return hpi(M, labels=conditions, n_boot=n_boot, seed=seed)
