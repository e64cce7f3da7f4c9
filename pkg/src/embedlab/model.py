"""Toy multi-task model: embedding concat, ReLU trunk, one sigmoid head per task."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from embedlab import ConfigError
from embedlab.feature import EmbeddingTable, HashSpec, hash_id
from embedlab.seeding import derive_seed, rng_for

BCE_EPS = 1e-7


@dataclass(frozen=True)
class ToyModelConfig:
    tables: tuple[HashSpec, ...]
    tasks: tuple[str, ...]
    dim: int = 32
    continuous_dim: int = 4
    trunk: tuple[int, ...] = (64, 32)
    loss_weights: tuple[float, ...] | None = None
    dtype: str = "float32"
    seed: int = 0
    head_bias: tuple[float, ...] | None = None

    def __post_init__(self):
        if not self.tasks:
            raise ConfigError("model needs at least one task head")
        if len(set(self.tasks)) != len(self.tasks):
            raise ConfigError("duplicate task heads")
        if self.loss_weights is not None:
            if len(self.loss_weights) != len(self.tasks):
                raise ConfigError("one loss weight per task is required")
            if any(w <= 0 for w in self.loss_weights):
                raise ConfigError("loss weights must be positive")
        if self.head_bias is not None and len(self.head_bias) != len(self.tasks):
            raise ConfigError("one head bias per task is required")
        if any(w < 1 for w in self.trunk):
            raise ConfigError("trunk widths must be positive")

    @property
    def input_width(self) -> int:
        return len(self.tables) * self.dim + self.continuous_dim

    @property
    def weights(self) -> np.ndarray:
        if self.loss_weights is None:
            return np.ones(len(self.tasks))
        return np.asarray(self.loss_weights, dtype=np.float64)


@dataclass
class ForwardRecord:
    rows: np.ndarray
    inputs: list[np.ndarray]      # input to each dense layer (trunk layers then head)
    preacts: list[np.ndarray]     # trunk pre-activations
    logits: np.ndarray
    probs: np.ndarray


@dataclass
class LossResult:
    total: float
    per_task: np.ndarray
    empty: np.ndarray             # tasks with no defined label in the batch
    grad_logits: np.ndarray = field(repr=False)


@dataclass
class SparseRowGrad:
    rows: np.ndarray              # sorted unique rows referenced by the batch
    values: np.ndarray            # (len(rows), d), duplicates summed
    counts: np.ndarray            # occurrences of each row in the batch


@dataclass
class Gradients:
    dense: dict[str, np.ndarray]
    sparse: dict[str, SparseRowGrad]

    def all_finite(self) -> bool:
        return all(np.isfinite(g).all() for g in self.dense.values()) and all(
            np.isfinite(s.values).all() for s in self.sparse.values())

    def global_norm(self) -> float:
        sq = sum(float(np.square(g, dtype=np.float64).sum()) for g in self.dense.values())
        sq += sum(float(np.square(s.values, dtype=np.float64).sum()) for s in self.sparse.values())
        return float(np.sqrt(sq))


def stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class ToyModel:
    def __init__(self, config: ToyModelConfig):
        self.config = config
        self.dtype = np.dtype(config.dtype)
        self.tables = [
            EmbeddingTable(spec, config.dim, seed=derive_seed(config.seed, 100 + i), dtype=self.dtype)
            for i, spec in enumerate(config.tables)
        ]
        self.params: dict[str, np.ndarray] = {}
        rng = rng_for(config.seed, 11)
        widths = [config.input_width, *config.trunk]
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            lim = np.sqrt(6.0 / (a + b))
            self.params[f"trunk.{i}.W"] = rng.uniform(-lim, lim, (a, b)).astype(self.dtype)
            self.params[f"trunk.{i}.b"] = np.zeros(b, self.dtype)
        last = widths[-1]
        lim = np.sqrt(6.0 / (last + 1))
        self.params["head.W"] = rng.uniform(-lim, lim, (last, len(config.tasks))).astype(self.dtype)
        self.params["head.b"] = np.zeros(len(config.tasks), self.dtype)
        if config.head_bias is not None:
            self.params["head.b"][:] = config.head_bias

    @property
    def task_names(self) -> list[str]:
        return list(self.config.tasks)

    @property
    def num_layers(self) -> int:
        return len(self.config.trunk)

    def table(self, name: str) -> EmbeddingTable:
        for t in self.tables:
            if t.name == name:
                return t
        raise KeyError(name)

    def table_seed(self, index: int, stream: int = 0) -> int:
        """Seed for initializing table ``index``; stream 0 is the initial draw."""
        if stream == 0:
            return derive_seed(self.config.seed, 100 + index)
        return derive_seed(self.config.seed, 100 + index, stream)

    def encode(self, raw_ids) -> np.ndarray:
        """Hash raw IDs (n, n_tables) into row indices."""
        raw_ids = np.asarray(raw_ids)
        if raw_ids.ndim != 2 or raw_ids.shape[1] != len(self.tables):
            raise ConfigError(f"expected raw IDs of shape (n, {len(self.tables)}), got {raw_ids.shape}")
        return np.stack([hash_id(raw_ids[:, i], t.spec) for i, t in enumerate(self.tables)], axis=1)

    def forward(self, rows, continuous) -> tuple[np.ndarray, ForwardRecord]:
        rows = np.asarray(rows)
        continuous = np.asarray(continuous)
        n = rows.shape[0]
        if rows.ndim != 2 or rows.shape[1] != len(self.tables):
            raise ConfigError(f"batch has {rows.shape[1] if rows.ndim == 2 else '?'} categorical features, "
                              f"model expects {len(self.tables)}")
        if continuous.shape != (n, self.config.continuous_dim):
            raise ConfigError(f"continuous features must have shape ({n}, {self.config.continuous_dim})")
        parts = [t.lookup(rows[:, i]) for i, t in enumerate(self.tables)]
        parts.append(continuous.astype(self.dtype, copy=False))
        x = np.concatenate(parts, axis=1)
        inputs, preacts = [], []
        for i in range(self.num_layers):
            inputs.append(x)
            z = x @ self.params[f"trunk.{i}.W"] + self.params[f"trunk.{i}.b"]
            preacts.append(z)
            x = np.maximum(z, 0)
        inputs.append(x)
        logits = x @ self.params["head.W"] + self.params["head.b"]
        probs = stable_sigmoid(logits)
        return probs, ForwardRecord(rows, inputs, preacts, logits, probs)

    def predict(self, rows, continuous, chunk: int = 50_000) -> np.ndarray:
        out = [self.forward(rows[i:i + chunk], continuous[i:i + chunk])[0] for i in range(0, len(rows), chunk)]
        return np.concatenate(out) if out else np.zeros((0, len(self.config.tasks)), self.dtype)

    def backward(self, record: ForwardRecord, loss: LossResult) -> Gradients:
        g = loss.grad_logits.astype(self.dtype, copy=False)
        dense = {}
        h = record.inputs[-1]
        dense["head.W"] = h.T @ g
        dense["head.b"] = g.sum(axis=0)
        dx = g @ self.params["head.W"].T
        for i in reversed(range(self.num_layers)):
            dz = dx * (record.preacts[i] > 0)
            dense[f"trunk.{i}.W"] = record.inputs[i].T @ dz
            dense[f"trunk.{i}.b"] = dz.sum(axis=0)
            dx = dz @ self.params[f"trunk.{i}.W"].T
        d = self.config.dim
        sparse = {}
        for i, t in enumerate(self.tables):
            sparse[t.name] = _sum_rows(record.rows[:, i], dx[:, i * d:(i + 1) * d])
        return Gradients(dense, sparse)

    def dense_state(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}


def _sum_rows(rows, values) -> SparseRowGrad:
    uniq, inv, counts = np.unique(rows, return_inverse=True, return_counts=True)
    order = np.argsort(inv, kind="stable")
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    summed = np.add.reduceat(values[order], starts, axis=0) if len(rows) else values[:0]
    return SparseRowGrad(uniq.astype(np.int64), summed, counts.astype(np.int64))


def loss(scores, labels, loss_weights=None, eps: float = BCE_EPS) -> LossResult:
    """Masked mean BCE per task and their weighted sum.

    ``labels`` holds 0, 1 or 255 (undefined). Undefined entries are excluded
    from both the loss and its gradient.
    """
    p = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_tasks = p.shape[1]
    w = np.ones(n_tasks) if loss_weights is None else np.asarray(loss_weights, dtype=np.float64)
    mask = labels <= 1
    y = np.where(mask, labels, 0).astype(np.float64)
    pc = np.clip(p, eps, 1 - eps)
    ce = -(y * np.log(pc) + (1 - y) * np.log1p(-pc))
    n_def = mask.sum(axis=0)
    empty = n_def == 0
    denom = np.maximum(n_def, 1)
    per_task = np.where(mask, ce, 0.0).sum(axis=0) / denom
    per_task[empty] = 0.0
    total = float((w * per_task).sum())
    inside = (p > eps) & (p < 1 - eps)
    grad = np.where(mask & inside, p - y, 0.0) * (w / denom)
    return LossResult(total, per_task, empty, grad)
