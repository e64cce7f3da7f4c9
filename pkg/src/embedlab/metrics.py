"""ROC-AUC, cumulative AUC gain and frequency-distribution diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from embedlab.feature import EmbeddingTable
from embedlab.synthgen import coverage_fraction


class UndefinedAUC(ValueError):
    """AUC needs at least one positive and one negative label."""


def roc_auc(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 * P(tie), via average-rank sums."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUC(f"{n_pos} positives and {n_neg} negatives")
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def safe_auc(scores, labels) -> float:
    """roc_auc, or NaN for a single-class day (callers flag those days)."""
    try:
        return roc_auc(scores, labels)
    except UndefinedAUC:
        return math.nan


@dataclass
class AucSeries:
    arm: str
    days: list[int]
    values: dict[str, list[float]]   # task -> AUC per day, NaN where undefined

    def task(self, name: str) -> np.ndarray:
        return np.asarray(self.values[name], dtype=np.float64)


@dataclass
class GainReport:
    treatment: str
    control: str
    task: str
    cumulative_gain: float
    per_day: list[float] = field(default_factory=list)
    skipped_days: list[int] = field(default_factory=list)


def cumulative_auc_gain(treatment: AucSeries, control: AucSeries, task: str) -> float:
    """(sum of treatment AUCs / sum of control AUCs - 1) * 100 over aligned days."""
    return gain_report(treatment, control, task).cumulative_gain


def gain_report(treatment: AucSeries, control: AucSeries, task: str) -> GainReport:
    if list(treatment.days) != list(control.days):
        raise ValueError(f"days of {treatment.arm!r} and {control.arm!r} are not aligned")
    t, c = treatment.task(task), control.task(task)
    if t.size == 0 or t.size != c.size:
        raise ValueError("AUC series must be non-empty and of equal length")
    ok = np.isfinite(t) & np.isfinite(c)
    skipped = [d for d, k in zip(treatment.days, ok) if not k]
    if not ok.any():
        raise ValueError(f"no day with a defined AUC for task {task!r}")
    csum = c[ok].sum()
    if csum <= 0:
        raise ValueError("control AUC sum must be positive")
    gain = (t[ok].sum() / csum - 1.0) * 100.0
    per_day = [float((a / b - 1.0) * 100.0) if k else math.nan for a, b, k in zip(t, c, ok)]
    return GainReport(treatment.arm, control.arm, task, float(gain), per_day, skipped)


@dataclass
class FreqReport:
    table: str
    num_rows: int
    total: int
    ranks: np.ndarray
    counts: np.ndarray
    coverage: dict[float, float]
    never_seen: float


def freq_report(table: EmbeddingTable | np.ndarray, masses=(0.5, 0.9, 0.99), name: str | None = None) -> FreqReport:
    """Rank-frequency points plus coverage fractions of the counter vector."""
    freq = table.freq if isinstance(table, EmbeddingTable) else np.asarray(table)
    name = name or (table.name if isinstance(table, EmbeddingTable) else "table")
    total = int(freq.astype(np.int64).sum())
    if total == 0:
        raise ValueError(f"table {name!r} has no recorded lookups")
    counts = np.sort(freq[freq > 0])[::-1].astype(np.int64)
    return FreqReport(
        table=name,
        num_rows=int(freq.size),
        total=total,
        ranks=np.arange(1, counts.size + 1),
        counts=counts,
        coverage={m: coverage_fraction(freq, m) for m in masses},
        never_seen=float((freq == 0).mean()),
    )
