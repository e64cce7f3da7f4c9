"""Grouped Adam with a separate embedding learning rate, frequency-adaptive
row scaling (FAL) and embedding re-initialization (MEDA)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from embedlab import ConfigError
from embedlab.model import Gradients, ToyModel

FAL_MODES = ("off", "log", "linear")
FAL_APPLICATIONS = ("scale_update", "scale_gradient")


@dataclass(frozen=True)
class SparseOptimizerConfig:
    base_lr: float = 0.00015
    embedding_lr_multiplier: float = 50.0

    def __post_init__(self):
        if self.base_lr <= 0 or self.embedding_lr_multiplier <= 0:
            raise ConfigError("learning rate and multiplier must be positive")

    @property
    def embedding_lr(self) -> float:
        return self.base_lr * self.embedding_lr_multiplier


@dataclass(frozen=True)
class FalConfig:
    mode: str = "off"
    application: str = "scale_update"
    exclude: tuple[str, ...] = ()

    def __post_init__(self):
        if self.mode not in FAL_MODES:
            raise ConfigError(f"FAL mode must be one of {FAL_MODES}, got {self.mode!r}")
        if self.application not in FAL_APPLICATIONS:
            raise ConfigError(f"FAL application must be one of {FAL_APPLICATIONS}, got {self.application!r}")

    @property
    def enabled(self) -> bool:
        return self.mode != "off"

    def applies_to(self, table_name: str) -> bool:
        return self.enabled and table_name not in self.exclude


def fal_alpha(freq, log_freq_max: float | None = None, mode: str = "log", *,
              rows=None, base: float | None = None, max_freq: int | None = None) -> np.ndarray:
    """Per-row learning-rate scale from accumulated row frequencies.

    log:    log(1 + F[i]) / max_j log(1 + F[j])
    linear: F[i] / max_j F[j]

    ``log_freq_max`` (natural log) and ``max_freq`` may be passed to skip the
    O(n) scan; ``rows`` restricts the output to a subset of rows. ``base``
    changes the logarithm base, which cancels in the ratio.
    """
    freq = np.asarray(freq)
    sel = freq if rows is None else freq[rows]
    sel = sel.astype(np.float64)
    if mode == "log":
        if log_freq_max is None:
            log_freq_max = float(np.log1p(freq.astype(np.float64)).max()) if freq.size else 0.0
        if log_freq_max <= 0:
            raise ValueError("no row has been observed yet; accumulate frequencies before computing alpha")
        if base is None:
            return np.log1p(sel) / log_freq_max
        lb = math.log(base)
        return (np.log1p(sel) / lb) / (log_freq_max / lb)
    if mode == "linear":
        if max_freq is None:
            max_freq = int(freq.max()) if freq.size else 0
        if max_freq <= 0:
            raise ValueError("no row has been observed yet; accumulate frequencies before computing alpha")
        return sel / float(max_freq)
    raise ValueError(f"alpha is undefined for FAL mode {mode!r}")


def fal_apply(values: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Scale each row of ``values`` by its alpha."""
    alpha = np.asarray(alpha)
    if alpha.shape[0] != values.shape[0]:
        raise RuntimeError(f"alpha covers {alpha.shape[0]} rows but values have {values.shape[0]}")
    return values * alpha.astype(values.dtype, copy=False)[:, None]


def adam_update(param, m, v, g, lr, beta1, beta2, eps, step, scale=None):
    """In-place Adam update on arrays; returns the applied step."""
    m *= beta1
    m += (1 - beta1) * g
    v *= beta2
    v += (1 - beta2) * (g * g)
    mhat = m / (1 - beta1 ** step)
    vhat = v / (1 - beta2 ** step)
    delta = lr * mhat / (np.sqrt(vhat) + eps)
    if scale is not None:
        delta = delta * scale
    param -= delta
    return delta


class RowMoments:
    """Adam moments for an embedding table, holding entries only for touched rows."""

    def __init__(self, num_rows: int, dim: int, dtype):
        self.shape = (num_rows, dim)
        self.dtype = dtype
        self.m: np.ndarray | None = None
        self.v: np.ndarray | None = None
        self.touched = np.zeros(num_rows, dtype=bool)

    def __len__(self):
        return int(self.touched.sum())

    def ensure(self):
        if self.m is None:
            self.m = np.zeros(self.shape, self.dtype)
            self.v = np.zeros(self.shape, self.dtype)

    def clear(self):
        self.m = self.v = None
        self.touched[:] = False


@dataclass
class AdamGroup:
    name: str
    learning_rate: float
    sparse: bool
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-5
    step_count: int = 0
    moments: dict = field(default_factory=dict)


class SparseAdam:
    """Adam over two parameter groups: dense layers and embedding tables.

    Embedding rows are updated lazily: only rows present in a batch advance
    their moments and weights. ``lazy=False`` decays every row each step.
    """

    def __init__(self, model: ToyModel, config: SparseOptimizerConfig | None = None,
                 fal: FalConfig | None = None, betas=(0.9, 0.999), eps: float = 1e-5,
                 clip_norm: float | None = None, lazy: bool = True):
        self.model = model
        self.config = config or SparseOptimizerConfig()
        self.fal = fal or FalConfig()
        self.clip_norm = clip_norm
        self.lazy = lazy
        b1, b2 = betas
        if not (0 < b1 < 1 and 0 < b2 < 1) or eps <= 0:
            raise ConfigError("Adam needs betas in (0, 1) and a positive epsilon")
        self.dense = AdamGroup("dense", self.config.base_lr, False, b1, b2, eps)
        self.embedding = AdamGroup("embedding", self.config.embedding_lr, True, b1, b2, eps)
        for name, p in model.params.items():
            self.dense.moments[name] = (np.zeros_like(p), np.zeros_like(p))
        for t in model.tables:
            self.embedding.moments[t.name] = RowMoments(t.num_rows, t.dim, t.weights.dtype)
        self.rejected = 0

    @property
    def groups(self) -> list[AdamGroup]:
        return [self.dense, self.embedding]

    def step(self, grads: Gradients, row_scales: dict[str, np.ndarray] | None = None) -> bool:
        """Apply one update. ``row_scales`` maps table name to FAL alphas aligned
        with that table's gradient rows. Returns False if the batch was rejected."""
        if not grads.all_finite():
            self.rejected += 1
            return False
        clip = 1.0
        if self.clip_norm:
            norm = grads.global_norm()
            if norm > self.clip_norm:
                clip = self.clip_norm / norm
        row_scales = row_scales or {}

        g_dense = self.dense
        g_dense.step_count += 1
        for name, p in self.model.params.items():
            m, v = g_dense.moments[name]
            g = grads.dense[name]
            if clip != 1.0:
                g = g * clip
            adam_update(p, m, v, g, g_dense.learning_rate, g_dense.beta1, g_dense.beta2,
                        g_dense.epsilon, g_dense.step_count)

        g_emb = self.embedding
        g_emb.step_count += 1
        for table in self.model.tables:
            sg = grads.sparse.get(table.name)
            mom = g_emb.moments[table.name]
            alpha = row_scales.get(table.name)
            if sg is None or (sg.rows.size == 0 and self.lazy):
                continue
            g = sg.values if clip == 1.0 else sg.values * clip
            scale = None
            if alpha is not None:
                if self.fal.application == "scale_gradient":
                    g = fal_apply(g, alpha)
                else:
                    scale = alpha.astype(g.dtype, copy=False)[:, None]
            mom.ensure()
            if self.lazy:
                rows = sg.rows
                w, m, v = table.weights[rows], mom.m[rows], mom.v[rows]
                adam_update(w, m, v, g, g_emb.learning_rate, g_emb.beta1, g_emb.beta2,
                            g_emb.epsilon, g_emb.step_count, scale)
                table.weights[rows], mom.m[rows], mom.v[rows] = w, m, v
                mom.touched[rows] = True
            else:
                full = np.zeros_like(table.weights)
                full[sg.rows] = g
                full_scale = None
                if scale is not None and table.max_freq > 0:
                    full_scale = fal_alpha(table.freq, table.log_freq_max, self.fal.mode,
                                           max_freq=table.max_freq).astype(scale.dtype)[:, None]
                    full_scale[sg.rows] = scale
                adam_update(table.weights, mom.m, mom.v, full, g_emb.learning_rate, g_emb.beta1,
                            g_emb.beta2, g_emb.epsilon, g_emb.step_count, full_scale)
                mom.touched[:] = True
        return True

    def clear_embedding_moments(self) -> None:
        for mom in self.embedding.moments.values():
            mom.clear()

    def clear_dense_moments(self) -> None:
        for m, v in self.dense.moments.values():
            m[...] = 0
            v[...] = 0


def meda_reinit(model: ToyModel, optimizer: SparseAdam, stream: int) -> None:
    """Redraw every embedding table from its init distribution with a fresh seed stream.

    Dense parameters and frequency counters are kept; embedding moments are cleared.
    """
    if stream < 1:
        raise ValueError("stream 0 is reserved for the initial draw")
    for i, table in enumerate(model.tables):
        table.initialize(model.table_seed(i, stream))
    optimizer.clear_embedding_moments()
