"""Report figures. matplotlib is imported lazily so the library runs without it."""

from __future__ import annotations

from pathlib import Path

import numpy as np

_DPI = 150


def available() -> bool:
    try:
        import matplotlib  # noqa: F401
    except ImportError:
        return False
    return True


def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _save(fig, path: Path) -> Path:
    fig.savefig(path, dpi=_DPI, bbox_inches="tight")
    _plt().close(fig)
    return path


def loss_curves(traces: dict, tasks: list[str], path: Path) -> Path:
    """Next-day test loss per task, one line per arm, epoch boundaries dashed."""
    plt = _plt()
    panels = [*tasks, "total"]
    ncol = min(3, len(panels))
    nrow = -(-len(panels) // ncol)
    fig, axes = plt.subplots(nrow, ncol, figsize=(4.2 * ncol, 3.0 * nrow), squeeze=False)
    for ax, task in zip(axes.flat, panels):
        for arm, trace in traces.items():
            its, vals = trace.series(task)
            ax.plot(its, vals, label=arm, lw=1.2)
        for b in next(iter(traces.values())).boundaries if traces else []:
            ax.axvline(b, color="0.5", ls="--", lw=0.8)
        ax.set_title(task)
        ax.set_xlabel("iteration")
        ax.set_ylabel("test loss")
    for ax in list(axes.flat)[len(panels):]:
        ax.set_visible(False)
    axes.flat[0].legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def auc_gains(reports: list, path: Path) -> Path:
    """Per-day AUC gain (%) of each treatment over the control."""
    plt = _plt()
    tasks = sorted({r.task for r in reports})
    fig, axes = plt.subplots(1, len(tasks), figsize=(4.2 * len(tasks), 3.0), squeeze=False)
    for ax, task in zip(axes.flat, tasks):
        for r in (r for r in reports if r.task == task):
            gains = np.asarray(r.per_day, dtype=float)
            ax.plot(np.arange(1, gains.size + 1), gains, marker="o", ms=3,
                    label=f"{r.treatment} ({r.cumulative_gain:+.3f}%)")
        ax.axhline(0, color="0.5", lw=0.8)
        ax.set_title(task)
        ax.set_xlabel("continual day")
        ax.set_ylabel("AUC gain (%)")
        ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def rank_frequency(reports: list, path: Path) -> Path:
    """Log-log rank-frequency of embedding rows per table."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(4.8, 3.4))
    for r in reports:
        ax.loglog(r.ranks, r.counts, lw=1.0, label=f"{r.table} (50%: {r.coverage[0.5]:.2%})")
    ax.set_xlabel("row rank")
    ax.set_ylabel("lookups")
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)
