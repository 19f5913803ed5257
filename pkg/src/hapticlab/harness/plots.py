"""SVG figures with reproducible bytes (fixed hash salt, no date metadata)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {"svg.hashsalt": "hapticlab", "svg.fonttype": "none", "font.size": 9}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return path


def eps_bar_chart(means: dict, path) -> Path:
    """Grouped bars of mean eps_F; ``means[task][condition] -> value``."""
    with plt.rc_context(_RC):
        tasks = list(means)
        conds = list(next(iter(means.values())))
        x = np.arange(len(tasks))
        width = 0.8 / len(conds)
        fig, ax = plt.subplots(figsize=(5, 3))
        for i, c in enumerate(conds):
            ax.bar(x + (i - (len(conds) - 1) / 2) * width, [means[t][c] for t in tasks], width, label=c)
        ax.set_xticks(x, tasks)
        ax.set_ylabel("mean normalized force error")
        ax.set_yscale("log")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def hpi_bar_chart(scores: dict, path) -> Path:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.bar(list(scores), list(scores.values()), color="0.4")
        ax.set_ylim(0, 1)
        ax.set_ylabel("HPI")
        fig.tight_layout()
        return _save(fig, path)


def force_trace(t, series: dict, path, ylabel: str = "force (N)") -> Path:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 3))
        for name, y in series.items():
            ax.plot(t, y, lw=1, label=name)
        ax.set_xlabel("time (s)")
        ax.set_ylabel(ylabel)
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def campaign_plots(result, out_dir) -> list:
    out = Path(out_dir)
    tasks = sorted({r.task for rs in result.records.values() for r in rs})
    means = {t: {c: result.mean(c, "eps_F", t) for c in result.records} for t in tasks}
    paths = [eps_bar_chart(means, out / "eps_by_task.svg")]
    if result.hpi is not None:
        paths.append(hpi_bar_chart(result.hpi.condition_scores, out / "hpi.svg"))
    return paths
