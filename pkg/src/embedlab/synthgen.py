"""Day-partitioned synthetic CTR/CVR data with Zipf-skewed categorical IDs.

Labels come from a planted logistic model: every raw ID owns a hidden
vector, each task owns a weight per feature, and a per-task bias is solved by
bisection so the expected positive rate hits the configured density.
"""

from __future__ import annotations

import hashlib
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from embedlab import ConfigError, DataIntegrityError
from embedlab.seeding import rng_for

UNDEFINED = 255
MAGIC = b"EMB1"
FORMAT_VERSION = 1

S_LOW, S_HIGH = 0.1, 5.0


class CalibrationError(ConfigError):
    pass


@dataclass(frozen=True)
class ZipfIdSpace:
    feature_name: str
    num_ids: int
    exponent: float
    seed: int = 0

    def __post_init__(self):
        if self.num_ids < 1 or self.num_ids > 2**32:
            raise ConfigError(f"num_ids for {self.feature_name!r} must be in [1, 2**32]")
        if self.exponent <= 0:
            raise ConfigError(f"Zipf exponent for {self.feature_name!r} must be positive")

    def probabilities(self) -> np.ndarray:
        """Probability of each rank (index 0 is rank 1)."""
        return _zipf_probs(self.num_ids, float(self.exponent))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Raw IDs; raw ID ``k`` is the rank-``k+1`` ID."""
        cdf = _zipf_cdf(self.num_ids, float(self.exponent))
        ids = np.searchsorted(cdf, rng.random(n), side="right")
        return np.minimum(ids, self.num_ids - 1).astype(np.uint32)


@lru_cache(maxsize=32)
def _zipf_probs(num_ids: int, exponent: float) -> np.ndarray:
    w = np.arange(1, num_ids + 1, dtype=np.float64) ** -exponent
    p = w / w.sum()
    p.setflags(write=False)
    return p


@lru_cache(maxsize=32)
def _zipf_cdf(num_ids: int, exponent: float) -> np.ndarray:
    cdf = np.cumsum(_zipf_probs(num_ids, exponent))
    cdf /= cdf[-1]
    cdf.setflags(write=False)
    return cdf


def top_mass(num_ids: int, k: int, exponent: float) -> float:
    w = np.arange(1, num_ids + 1, dtype=np.float64) ** -exponent
    return float(w[:k].sum() / w.sum())


def calibrate_zipf(num_ids: int, target_fraction: float, target_mass: float, *, tol: float = 0.01) -> float:
    """Exponent whose top ``ceil(target_fraction * num_ids)`` ranks carry ``target_mass``.

    Bisection over [0.1, 5.0]; the top-k mass is increasing in the exponent.
    """
    if not 0 < target_fraction < 1 or not 0 < target_mass < 1:
        raise ConfigError("target_fraction and target_mass must lie in (0, 1)")
    if num_ids < 100:
        raise ConfigError("calibration needs num_ids >= 100")
    k = max(1, math.ceil(target_fraction * num_ids - 1e-9))
    ranks = np.arange(1, num_ids + 1, dtype=np.float64)
    logr = np.log(ranks)

    def mass(s):
        w = np.exp(-s * logr)
        return float(w[:k].sum() / w.sum())

    lo, hi = S_LOW, S_HIGH
    m_lo, m_hi = mass(lo), mass(hi)
    if m_lo > target_mass:
        if m_lo <= target_mass * (1 + tol):
            return lo
        raise CalibrationError(
            f"top {k}/{num_ids} ranks already carry {m_lo:.4f} > {target_mass} at exponent {lo}")
    if m_hi < target_mass:
        if m_hi >= target_mass * (1 - tol):
            return hi
        raise CalibrationError(
            f"top {k}/{num_ids} ranks carry at most {m_hi:.4f} < {target_mass} at exponent {hi}")
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if mass(mid) < target_mass:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12:
            break
    return 0.5 * (lo + hi)


def coverage_fraction(frequencies, mass: float) -> float:
    """Smallest fraction of IDs, taken by descending frequency, holding ``mass`` of the total."""
    f = np.asarray(frequencies, dtype=np.float64).ravel()
    if not 0 < mass < 1:
        raise ValueError("mass must lie in (0, 1)")
    if f.size == 0 or (f < 0).any():
        raise ValueError("frequencies must be a non-empty non-negative vector")
    total = f.sum()
    if total <= 0:
        raise ValueError("all frequencies are zero")
    c = np.cumsum(np.sort(f)[::-1])
    k = int(np.searchsorted(c, mass * total * (1 - 1e-12), side="left")) + 1
    return min(k, f.size) / f.size


@dataclass(frozen=True)
class TaskSpec:
    """One objective.

    ``relative_density`` is the positive count relative to the densest task
    (as in "relative to clicks"). A conditional task is only labelled where its
    parent label equals ``condition_value``.
    """

    name: str
    relative_density: float
    condition: str | None = None
    condition_value: int = 1

    def __post_init__(self):
        if not 0 < self.relative_density <= 1:
            raise ConfigError(f"relative_density of {self.name!r} must be in (0, 1]")
        if self.condition_value not in (0, 1):
            raise ConfigError(f"condition_value of {self.name!r} must be 0 or 1")


def task_order(tasks: list[TaskSpec]) -> list[int]:
    """Topological order of task indices (parents first); rejects cycles and dangling parents."""
    by_name = {t.name: i for i, t in enumerate(tasks)}
    if len(by_name) != len(tasks):
        raise ConfigError("duplicate task names")
    if sum(t.relative_density == 1.0 for t in tasks) != 1:
        raise ConfigError("exactly one task must have relative_density = 1.0")
    for t in tasks:
        if t.condition is not None and t.condition not in by_name:
            raise ConfigError(f"task {t.name!r} is conditioned on unknown task {t.condition!r}")
    order: list[int] = []
    state = [0] * len(tasks)  # 0 new, 1 on stack, 2 done

    def visit(i, path):
        if state[i] == 2:
            return
        if state[i] == 1:
            cyc = path[path.index(tasks[i].name):] + [tasks[i].name]
            raise ConfigError("cyclic task condition: " + " -> ".join(cyc))
        state[i] = 1
        parent = tasks[i].condition
        if parent is not None:
            visit(by_name[parent], path + [tasks[i].name])
        state[i] = 2
        order.append(i)

    for i in range(len(tasks)):
        visit(i, [])
    return order


def target_rates(tasks: list[TaskSpec], base_density: float) -> dict[str, tuple[float, float]]:
    """Per task: (P(label defined), P(label = 1 | defined))."""
    if not 0 < base_density < 1:
        raise ConfigError("base_density must lie in (0, 1)")
    out: dict[str, tuple[float, float]] = {}
    by_name = {t.name: t for t in tasks}
    for i in task_order(tasks):
        t = tasks[i]
        pos = base_density * t.relative_density
        if t.condition is None:
            defined = 1.0
        else:
            p_def, p_rate = out[t.condition]
            parent_pos = base_density * by_name[t.condition].relative_density
            defined = parent_pos if t.condition_value == 1 else p_def - parent_pos
        if defined <= 0 or pos >= defined:
            raise ConfigError(f"task {t.name!r}: density {pos:.4g} is infeasible on its conditioning set")
        out[t.name] = (defined, pos / defined)
    return out


@dataclass(frozen=True)
class SignalConfig:
    """Knobs of the planted label model."""

    base_density: float = 0.2
    continuous_dim: int = 4
    hidden_dim: int = 8
    id_scale: float = 1.5
    continuous_scale: float = 0.5
    logit_noise: float = 0.5
    drift: float = 0.0
    calibration_examples: int = 400_000


@dataclass(frozen=True)
class DayPartition:
    day: int
    ids: np.ndarray          # (n, n_features) uint32 raw IDs
    continuous: np.ndarray   # (n, continuous_dim) float32
    labels: np.ndarray       # (n, n_tasks) uint8 in {0, 1, 255}

    def __len__(self):
        return self.ids.shape[0]

    def subset(self, index) -> DayPartition:
        return DayPartition(self.day, self.ids[index], self.continuous[index], self.labels[index])


class LabelModel:
    """Hidden per-ID vectors, per-task weights and density-matched biases."""

    def __init__(self, spaces, tasks, seed: int, signal: SignalConfig):
        self.spaces = tuple(spaces)
        self.tasks = tuple(tasks)
        self.seed = seed
        self.signal = signal
        self.order = task_order(list(tasks))
        self.rates = target_rates(list(tasks), signal.base_density)
        k = signal.hidden_dim
        self.hidden = [
            rng_for(s.seed, 1).standard_normal((s.num_ids, k)) / math.sqrt(k) for s in self.spaces
        ]
        self.task_w = []
        self.task_v = []
        for ti in range(len(self.tasks)):
            r = rng_for(seed, 2, ti)
            self.task_w.append(r.standard_normal((len(self.spaces), k)))
            self.task_v.append(r.standard_normal(signal.continuous_dim))
        self.bias = np.zeros(len(self.tasks))
        self._calibrate()

    def _rotation(self, day: int) -> np.ndarray | None:
        if self.signal.drift == 0 or day == 0:
            return None
        k = self.signal.hidden_dim
        rot = np.eye(k)
        a = self.signal.drift * day
        c, s = math.cos(a), math.sin(a)
        for i in range(0, k - 1, 2):
            rot[i, i], rot[i, i + 1], rot[i + 1, i], rot[i + 1, i + 1] = c, -s, s, c
        return rot

    def logits(self, ids, continuous, day: int, noise: np.ndarray) -> np.ndarray:
        """Bias-free logits, shape (n, n_tasks)."""
        sig = self.signal
        rot = self._rotation(day)
        n_f = len(self.spaces)
        out = np.zeros((ids.shape[0], len(self.tasks)))
        for f in range(n_f):
            h = self.hidden[f][ids[:, f]]
            if rot is not None:
                h = h @ rot
            for ti in range(len(self.tasks)):
                out[:, ti] += h @ self.task_w[ti][f]
        out *= sig.id_scale / math.sqrt(n_f)
        if sig.continuous_dim:
            v = np.stack(self.task_v, axis=1)
            out += sig.continuous_scale / math.sqrt(sig.continuous_dim) * (continuous.astype(np.float64) @ v)
        return out + sig.logit_noise * noise

    def _draw_inputs(self, n, rng):
        ids = np.stack([s.sample(n, rng) for s in self.spaces], axis=1) if self.spaces else np.zeros((n, 0), np.uint32)
        cont = rng.standard_normal((n, self.signal.continuous_dim)).astype(np.float32)
        noise = rng.standard_normal((n, len(self.tasks)))
        return ids, cont, noise

    def _calibrate(self):
        rng = rng_for(self.seed, 3)
        ids, cont, noise = self._draw_inputs(self.signal.calibration_examples, rng)
        z = self.logits(ids, cont, 0, noise)
        names = {t.name: i for i, t in enumerate(self.tasks)}
        p_def = {}
        probs = np.zeros_like(z)
        for ti in self.order:
            t = self.tasks[ti]
            if t.condition is None:
                w = np.ones(z.shape[0])
            else:
                pi = names[t.condition]
                pp = probs[:, pi]
                w = p_def[pi] * (pp if t.condition_value == 1 else 1 - pp)
            target = self.rates[t.name][1]
            lo, hi = -40.0, 40.0
            wsum = w.sum()
            for _ in range(80):
                mid = 0.5 * (lo + hi)
                if (w * _sigmoid(z[:, ti] + mid)).sum() / wsum < target:
                    lo = mid
                else:
                    hi = mid
            self.bias[ti] = 0.5 * (lo + hi)
            probs[:, ti] = _sigmoid(z[:, ti] + self.bias[ti])
            p_def[ti] = w

    def sample_day(self, n: int, day: int) -> DayPartition:
        rng = rng_for(self.seed, 7, day)
        ids, cont, noise = self._draw_inputs(n, rng)
        p = _sigmoid(self.logits(ids, cont, day, noise) + self.bias)
        draws = rng.random(p.shape)
        labels = np.full(p.shape, UNDEFINED, dtype=np.uint8)
        names = {t.name: i for i, t in enumerate(self.tasks)}
        for ti in self.order:
            t = self.tasks[ti]
            y = (draws[:, ti] < p[:, ti]).astype(np.uint8)
            if t.condition is None:
                labels[:, ti] = y
            else:
                parent = labels[:, names[t.condition]]
                ok = parent == t.condition_value
                labels[ok, ti] = y[ok]
        for a in (ids, cont, labels):
            a.setflags(write=False)
        return DayPartition(day, ids, cont, labels)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


_MODEL_CACHE: dict = {}


def label_model(spaces, tasks, seed: int, signal: SignalConfig | None = None) -> LabelModel:
    signal = signal or SignalConfig()
    key = (tuple(spaces), tuple(tasks), seed, signal)
    if key not in _MODEL_CACHE:
        if len(_MODEL_CACHE) > 8:
            _MODEL_CACHE.clear()
        _MODEL_CACHE[key] = LabelModel(spaces, tasks, seed, signal)
    return _MODEL_CACHE[key]


def sample_day(spaces, tasks, n_examples: int, day: int, seed: int,
               signal: SignalConfig | None = None) -> DayPartition:
    if n_examples <= 0:
        raise ValueError("n_examples must be positive")
    if day < 0:
        raise ValueError("day must be non-negative")
    return label_model(spaces, tasks, seed, signal).sample_day(n_examples, day)


@dataclass(frozen=True)
class SyntheticDataset:
    spaces: tuple[ZipfIdSpace, ...]
    tasks: tuple[TaskSpec, ...]
    days: tuple[DayPartition, ...]
    seed: int = 0
    signal: SignalConfig = field(default_factory=SignalConfig)

    def __post_init__(self):
        for i, d in enumerate(self.days):
            if d.day != i:
                raise DataIntegrityError(f"day partitions must be contiguous from 0; slot {i} holds day {d.day}")

    def day(self, d: int) -> DayPartition:
        if not 0 <= d < len(self.days):
            raise KeyError(f"day {d} is not in the dataset (days 0..{len(self.days) - 1})")
        return self.days[d]

    @property
    def num_days(self) -> int:
        return len(self.days)

    @property
    def task_names(self) -> list[str]:
        return [t.name for t in self.tasks]

    @property
    def feature_names(self) -> list[str]:
        return [s.feature_name for s in self.spaces]


def generate_dataset(spaces, tasks, num_days: int, examples_per_day: int, seed: int,
                     signal: SignalConfig | None = None, jobs: int = 1) -> SyntheticDataset:
    signal = signal or SignalConfig()
    model = label_model(spaces, tasks, seed, signal)
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            days = list(ex.map(lambda d: model.sample_day(examples_per_day, d), range(num_days)))
    else:
        days = [model.sample_day(examples_per_day, d) for d in range(num_days)]
    return SyntheticDataset(tuple(spaces), tuple(tasks), tuple(days), seed, signal)


# -- on-disk format --------------------------------------------------------

def record_dtype(n_features: int, n_cont: int, n_tasks: int) -> np.dtype:
    fields = [("day", "<u4")]
    fields += [(f"id{i}", "<u4") for i in range(n_features)]
    fields += [(f"x{i}", "<f4") for i in range(n_cont)]
    fields += [(f"y{i}", "u1") for i in range(n_tasks)]
    return np.dtype(fields)


def _pack_names(names):
    out = b""
    for n in names:
        b = n.encode("utf-8")
        out += struct.pack("<H", len(b)) + b
    return out


def day_file_name(day: int) -> str:
    return f"day_{day:04d}.emb"


def write_day(path: Path, part: DayPartition, feature_names, task_names) -> None:
    n, nf = part.ids.shape
    nc = part.continuous.shape[1]
    nt = part.labels.shape[1]
    header = MAGIC + struct.pack("<IQIII", FORMAT_VERSION, n, nf, nc, nt)
    header += _pack_names(feature_names) + _pack_names(task_names)
    rec = np.empty(n, dtype=record_dtype(nf, nc, nt))
    rec["day"] = part.day
    for i in range(nf):
        rec[f"id{i}"] = part.ids[:, i]
    for i in range(nc):
        rec[f"x{i}"] = part.continuous[:, i]
    for i in range(nt):
        rec[f"y{i}"] = part.labels[:, i]
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rec.tobytes())


def read_day(path: Path) -> tuple[DayPartition, list[str], list[str]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise DataIntegrityError(f"{path}: bad magic bytes")
    version, n, nf, nc, nt = struct.unpack_from("<IQIII", data, 4)
    if version != FORMAT_VERSION:
        raise DataIntegrityError(f"{path}: unsupported format version {version}")
    off = 4 + struct.calcsize("<IQIII")
    names = []
    for _ in range(nf + nt):
        (ln,) = struct.unpack_from("<H", data, off)
        names.append(data[off + 2:off + 2 + ln].decode("utf-8"))
        off += 2 + ln
    dt = record_dtype(nf, nc, nt)
    if len(data) - off != n * dt.itemsize:
        raise DataIntegrityError(f"{path}: expected {n} records of {dt.itemsize} bytes")
    rec = np.frombuffer(data, dtype=dt, count=n, offset=off)
    days = np.unique(rec["day"])
    if days.size != 1:
        raise DataIntegrityError(f"{path}: records span several days")
    ids = np.stack([rec[f"id{i}"] for i in range(nf)], axis=1).astype(np.uint32) if nf else np.zeros((n, 0), np.uint32)
    cont = np.stack([rec[f"x{i}"] for i in range(nc)], axis=1).astype(np.float32) if nc else np.zeros((n, 0), np.float32)
    lab = np.stack([rec[f"y{i}"] for i in range(nt)], axis=1).astype(np.uint8)
    for a in (ids, cont, lab):
        a.setflags(write=False)
    return DayPartition(int(days[0]), ids, cont, lab), names[:nf], names[nf:]


def schema_text(ds: SyntheticDataset, extra: dict | None = None) -> str:
    sig = ds.signal
    lines = [
        "format = EMB1",
        f"version = {FORMAT_VERSION}",
        f"days = {ds.num_days}",
        f"examples_per_day = {len(ds.days[0]) if ds.days else 0}",
        f"seed = {ds.seed}",
        f"record_bytes = {record_dtype(len(ds.spaces), sig.continuous_dim, len(ds.tasks)).itemsize}",
        f"continuous_dim = {sig.continuous_dim}",
        "features = " + ", ".join(ds.feature_names),
        "tasks = " + ", ".join(ds.task_names),
    ]
    for s in ds.spaces:
        lines.append(f"feature.{s.feature_name} = num_ids:{s.num_ids} exponent:{s.exponent!r} seed:{s.seed}")
    for t in ds.tasks:
        cond = "none" if t.condition is None else f"{t.condition}={t.condition_value}"
        lines.append(f"task.{t.name} = relative_density:{t.relative_density!r} condition:{cond}")
    lines.append("label_undefined = 255")
    for k, v in sorted((extra or {}).items()):
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def parse_schema(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


def write_dataset(ds: SyntheticDataset, out_dir: Path, extra: dict | None = None) -> str:
    """Write day files and the schema sidecar; returns the dataset hash."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for part in ds.days:
        write_day(out_dir / day_file_name(part.day), part, ds.feature_names, ds.task_names)
    (out_dir / "schema.txt").write_text(schema_text(ds, extra))
    digest = dataset_hash(out_dir)
    (out_dir / "dataset.sha256").write_text(digest + "\n")
    return digest


def dataset_hash(data_dir: Path) -> str:
    data_dir = Path(data_dir)
    h = hashlib.sha256()
    files = sorted(data_dir.glob("day_*.emb")) + [data_dir / "schema.txt"]
    for p in files:
        h.update(p.name.encode())
        h.update(hashlib.sha256(p.read_bytes()).digest())
    return h.hexdigest()


def read_days(data_dir: Path, days) -> dict[int, DayPartition]:
    data_dir = Path(data_dir)
    out = {}
    for d in days:
        p = data_dir / day_file_name(d)
        if not p.exists():
            raise KeyError(f"day {d} is missing from {data_dir}")
        out[d] = read_day(p)[0]
    return out
