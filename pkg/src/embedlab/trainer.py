"""Multi-epoch batch training followed by day-by-day continual training."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from embedlab import ConfigError
from embedlab.feature import BatchFrequencies
from embedlab.metrics import safe_auc
from embedlab.model import ToyModel, loss
from embedlab.optim import FalConfig, SparseAdam, SparseOptimizerConfig, fal_alpha, meda_reinit
from embedlab.seeding import rng_for

TOTAL = "total"


@dataclass(frozen=True)
class Arm:
    name: str
    fal: FalConfig = FalConfig()
    meda: bool = False
    sparse: SparseOptimizerConfig = SparseOptimizerConfig()
    reset_counters: bool = False
    reset_moments: bool = False


@dataclass(frozen=True)
class TrainPlan:
    batch_days: tuple[int, ...]
    epochs: int = 1
    shuffle_seed: int = 0
    continual_days: tuple[int, ...] = ()
    eval_cadence: int = 20
    eval_cap: int = 100_000
    batch_size: int = 2000
    arms: tuple[Arm, ...] = ()

    def __post_init__(self):
        bd = list(self.batch_days)
        if not bd or bd != list(range(bd[0], bd[0] + len(bd))) or bd[0] < 0:
            raise ConfigError("batch_days must be a non-empty contiguous range of days")
        cd = list(self.continual_days)
        if cd and cd != list(range(bd[-1] + 1, bd[-1] + 1 + len(cd))):
            raise ConfigError("continual_days must start the day after batch_days ends and be contiguous")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.eval_cadence < 1 or self.eval_cap < 1 or self.batch_size < 1:
            raise ConfigError("eval_cadence, eval_cap and batch_size must be positive")
        if len({a.name for a in self.arms}) != len(self.arms):
            raise ConfigError("arm names must be unique")

    @property
    def holdout_day(self) -> int:
        return self.batch_days[-1] + 1

    def required_days(self) -> list[int]:
        days = set(self.batch_days) | {self.holdout_day}
        days |= set(self.continual_days) | {d + 1 for d in self.continual_days}
        return sorted(days)


@dataclass
class EvalSample:
    iteration: int
    epoch: int
    per_task: np.ndarray
    total: float


@dataclass
class LossTrace:
    tasks: list[str]
    eval_day: int
    train_days: tuple[int, ...]
    evals: list[EvalSample] = field(default_factory=list)
    boundaries: list[int] = field(default_factory=list)
    train_iterations: list[int] = field(default_factory=list)
    train_epochs: list[int] = field(default_factory=list)
    train_per_task: list[np.ndarray] = field(default_factory=list)
    train_total: list[float] = field(default_factory=list)
    skipped: int = 0
    meda_fired: int = 0

    def series(self, task: str = TOTAL, split: str = "test") -> tuple[np.ndarray, np.ndarray]:
        if split == "test":
            its = np.array([e.iteration for e in self.evals])
            vals = [e.total if task == TOTAL else e.per_task[self.tasks.index(task)] for e in self.evals]
        else:
            its = np.array(self.train_iterations)
            vals = self.train_total if task == TOTAL else [p[self.tasks.index(task)] for p in self.train_per_task]
        return its, np.asarray(vals, dtype=np.float64)


@dataclass
class BoundaryDelta:
    relative: float
    absolute: float
    before: float
    after: float


def epoch_boundary_delta(trace: LossTrace, task: str = TOTAL, boundary: int = 0) -> BoundaryDelta:
    """Jump in test loss from the last eval of epoch k to the first eval of epoch k+1."""
    if boundary >= len(trace.boundaries):
        raise ValueError("trace has no epoch boundary at index %d" % boundary)
    k = boundary
    before = [e for e in trace.evals if e.epoch == k]
    after = [e for e in trace.evals if e.epoch == k + 1]
    if not before or not after:
        raise ValueError("evaluations are needed on both sides of the boundary")

    def val(e):
        return e.total if task == TOTAL else float(e.per_task[trace.tasks.index(task)])

    b, a = val(before[-1]), val(after[0])
    return BoundaryDelta((a - b) / b, a - b, b, a)


def smoothed(values, window: int = 50) -> np.ndarray:
    """Trailing moving average."""
    v = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.concatenate(([0.0], v)))
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


@dataclass
class DayEval:
    day: int
    eval_day: int
    per_task_loss: np.ndarray
    total_loss: float
    auc: dict[str, float]


@dataclass
class ContinualSeries:
    tasks: list[str]
    days: list[DayEval] = field(default_factory=list)

    def __len__(self):
        return len(self.days)

    def auc_series(self, arm: str):
        from embedlab.metrics import AucSeries
        return AucSeries(arm, [d.eval_day for d in self.days],
                         {t: [d.auc[t] for d in self.days] for t in self.tasks})


@dataclass
class Arrays:
    rows: np.ndarray
    continuous: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return self.rows.shape[0]

    def take(self, idx) -> Arrays:
        return Arrays(self.rows[idx], self.continuous[idx], self.labels[idx])


def _gather(model: ToyModel, dataset, days) -> Arrays:
    parts = [dataset.day(d) for d in days]
    return Arrays(
        model.encode(np.concatenate([p.ids for p in parts])),
        np.concatenate([p.continuous for p in parts]),
        np.concatenate([p.labels for p in parts]),
    )


def _check_tasks(model: ToyModel, dataset):
    names = getattr(dataset, "task_names", None)
    if names is not None and list(names) != model.task_names:
        raise ConfigError(f"dataset tasks {list(names)} do not match model heads {model.task_names}")


def train_step(model: ToyModel, opt: SparseAdam, batch: Arrays, events: list | None = None):
    """forward, backward, accumulate counters, FAL alphas, Adam step.

    Returns the LossResult, or None when the batch was skipped as non-finite.
    """
    probs, rec = model.forward(batch.rows, batch.continuous)
    res = loss(probs, batch.labels, model.config.weights)
    if not math.isfinite(res.total):
        return None
    grads = model.backward(rec, res)
    if not grads.all_finite():
        opt.rejected += 1
        return None
    scales = {}
    for table in model.tables:
        sg = grads.sparse[table.name]
        table.accumulate_freq(BatchFrequencies(sg.rows, sg.counts))
        if events is not None:
            events.append(("accumulate", table.name))
        if opt.fal.applies_to(table.name) and sg.rows.size:
            scales[table.name] = fal_alpha(table.freq, table.log_freq_max, opt.fal.mode,
                                           rows=sg.rows, max_freq=table.max_freq)
            if events is not None:
                events.append(("alpha", table.name))
    opt.step(grads, scales)
    if events is not None:
        events.append(("step", None))
    return res


def evaluate(model: ToyModel, data: Arrays, with_auc: bool = False):
    probs = model.predict(data.rows, data.continuous)
    res = loss(probs, data.labels, model.config.weights)
    aucs = {}
    if with_auc:
        for i, t in enumerate(model.task_names):
            m = data.labels[:, i] <= 1
            aucs[t] = safe_auc(probs[m, i], data.labels[m, i])
    return res, aucs


def eval_sample(plan: TrainPlan, data: Arrays, day: int) -> Arrays:
    if len(data) <= plan.eval_cap:
        return data
    idx = np.sort(rng_for(plan.shuffle_seed, 5, day).choice(len(data), plan.eval_cap, replace=False))
    return data.take(idx)


def _eval_points(n_batches: int, cadence: int) -> set[int]:
    return {max(1, math.ceil(n_batches * k / cadence)) for k in range(1, cadence + 1)}


def run_batch_phase(plan: TrainPlan, dataset, model: ToyModel, optimizer: SparseAdam, *,
                    meda: bool = False, events: list | None = None, on_batch=None) -> LossTrace:
    """Train ``plan.epochs`` shuffled passes over the batch days, scoring the next-day holdout."""
    _check_tasks(model, dataset)
    for d in list(plan.batch_days) + [plan.holdout_day]:
        dataset.day(d)
    train = _gather(model, dataset, plan.batch_days)
    holdout = eval_sample(plan, _gather(model, dataset, [plan.holdout_day]), plan.holdout_day)
    trace = LossTrace(model.task_names, plan.holdout_day, tuple(plan.batch_days))
    n = len(train)
    bs = plan.batch_size
    n_batches = math.ceil(n / bs)
    points = _eval_points(n_batches, plan.eval_cadence)
    it = 0
    for epoch in range(plan.epochs):
        if epoch > 0:
            trace.boundaries.append(it)
            if meda:
                meda_reinit(model, optimizer, stream=epoch)
                trace.meda_fired += 1
        perm = rng_for(plan.shuffle_seed, 1, epoch).permutation(n)
        for b in range(n_batches):
            idx = perm[b * bs:(b + 1) * bs]
            if on_batch is not None:
                on_batch(epoch, idx)
            it += 1
            res = train_step(model, optimizer, train.take(idx), events)
            if res is None:
                trace.skipped += 1
            else:
                trace.train_iterations.append(it)
                trace.train_epochs.append(epoch)
                trace.train_per_task.append(res.per_task)
                trace.train_total.append(res.total)
            if b + 1 in points:
                ev, _ = evaluate(model, holdout)
                trace.evals.append(EvalSample(it, epoch, ev.per_task, ev.total))
    return trace


def run_continual_phase(plan: TrainPlan, dataset, model: ToyModel, optimizer: SparseAdam,
                        events: list | None = None) -> ContinualSeries:
    """One pass per continual day D, then score day D+1."""
    _check_tasks(model, dataset)
    for d in plan.continual_days:
        for need in (d, d + 1):
            try:
                dataset.day(need)
            except KeyError:
                raise KeyError(f"continual training needs day {need}, which is missing") from None
    series = ContinualSeries(model.task_names)
    for d in plan.continual_days:
        data = _gather(model, dataset, [d])
        perm = rng_for(plan.shuffle_seed, 2, d).permutation(len(data))
        for b in range(0, len(data), plan.batch_size):
            train_step(model, optimizer, data.take(perm[b:b + plan.batch_size]), events)
        test = eval_sample(plan, _gather(model, dataset, [d + 1]), d + 1)
        res, aucs = evaluate(model, test, with_auc=True)
        series.days.append(DayEval(d, d + 1, res.per_task, res.total, aucs))
    return series


@dataclass
class ArmResult:
    arm: Arm
    trace: LossTrace
    series: ContinualSeries
    model: ToyModel
    optimizer: SparseAdam


def build_optimizer(model: ToyModel, arm: Arm, betas=(0.9, 0.999), eps=1e-5,
                    clip_norm=None, lazy=True) -> SparseAdam:
    return SparseAdam(model, arm.sparse, arm.fal, betas=betas, eps=eps, clip_norm=clip_norm, lazy=lazy)


def run_arm(plan: TrainPlan, dataset, model_config, arm: Arm, *, betas=(0.9, 0.999), eps=1e-5,
            clip_norm=None, lazy=True, after_batch=None) -> ArmResult:
    """Batch phase, optional counter/moment resets, continual phase.

    ``after_batch(model, trace)`` runs between the phases (used for checkpoints).
    """
    model = ToyModel(model_config)
    opt = build_optimizer(model, arm, betas, eps, clip_norm, lazy)
    trace = run_batch_phase(plan, dataset, model, opt, meda=arm.meda)
    if after_batch is not None:
        after_batch(model, trace)
    if arm.reset_counters:
        for t in model.tables:
            t.reset_freq()
    if arm.reset_moments:
        opt.clear_embedding_moments()
        opt.clear_dense_moments()
    series = run_continual_phase(plan, dataset, model, opt)
    return ArmResult(arm, trace, series, model, opt)


# -- CSV emitters ---------------------------------------------------------

TRACE_COLUMNS = ("iteration", "epoch", "task", "split", "metric", "value")
DAY_COLUMNS = ("day", "eval_day", "task", "split", "metric", "value")


def _fmt(x) -> str:
    return repr(float(x))


def write_trace_csv(trace: LossTrace, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for it, ep, per, tot in zip(trace.train_iterations, trace.train_epochs,
                                     trace.train_per_task, trace.train_total):
            for t, v in zip(trace.tasks, per):
                w.writerow((it, ep, t, "train", "loss", _fmt(v)))
            w.writerow((it, ep, TOTAL, "train", "loss", _fmt(tot)))
        for e in trace.evals:
            for t, v in zip(trace.tasks, e.per_task):
                w.writerow((e.iteration, e.epoch, t, "test", "loss", _fmt(v)))
            w.writerow((e.iteration, e.epoch, TOTAL, "test", "loss", _fmt(e.total)))
        for k, it in enumerate(trace.boundaries):
            w.writerow((it, k + 1, "", "marker", "epoch_boundary", "1.0"))


def read_trace_csv(path: Path) -> LossTrace:
    """Rebuild the test-loss part of a trace (plus train losses) from its CSV."""
    rows = list(csv.DictReader(open(path, newline="")))
    tasks = []
    for r in rows:
        if r["split"] in ("train", "test") and r["task"] != TOTAL and r["task"] not in tasks:
            tasks.append(r["task"])
    trace = LossTrace(tasks, -1, ())
    evals: dict[tuple[int, int], dict] = {}
    train: dict[tuple[int, int], dict] = {}
    for r in rows:
        key = (int(r["iteration"]), int(r["epoch"]))
        if r["split"] == "marker":
            trace.boundaries.append(int(r["iteration"]))
        elif r["split"] == "test":
            evals.setdefault(key, {})[r["task"]] = float(r["value"])
        elif r["split"] == "train":
            train.setdefault(key, {})[r["task"]] = float(r["value"])
    for (it, ep), d in sorted(evals.items()):
        trace.evals.append(EvalSample(it, ep, np.array([d[t] for t in tasks]), d[TOTAL]))
    for (it, ep), d in sorted(train.items()):
        trace.train_iterations.append(it)
        trace.train_epochs.append(ep)
        trace.train_per_task.append(np.array([d[t] for t in tasks]))
        trace.train_total.append(d[TOTAL])
    trace.boundaries.sort()
    return trace


def write_series_csv(series: ContinualSeries, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DAY_COLUMNS)
        for d in series.days:
            for i, t in enumerate(series.tasks):
                w.writerow((d.day, d.eval_day, t, "test", "loss", _fmt(d.per_task_loss[i])))
                w.writerow((d.day, d.eval_day, t, "test", "auc", _fmt(d.auc[t])))
            w.writerow((d.day, d.eval_day, TOTAL, "test", "loss", _fmt(d.total_loss)))


def read_series_csv(path: Path) -> ContinualSeries:
    rows = list(csv.DictReader(open(path, newline="")))
    tasks = []
    for r in rows:
        if r["task"] != TOTAL and r["task"] not in tasks:
            tasks.append(r["task"])
    series = ContinualSeries(tasks)
    by_day: dict[tuple[int, int], dict] = {}
    for r in rows:
        by_day.setdefault((int(r["day"]), int(r["eval_day"])), {})[(r["task"], r["metric"])] = float(r["value"])
    for (d, ed), vals in sorted(by_day.items()):
        series.days.append(DayEval(
            d, ed, np.array([vals[(t, "loss")] for t in tasks]), vals[(TOTAL, "loss")],
            {t: vals[(t, "auc")] for t in tasks}))
    return series
