"""Binary feature hashing and embedding tables with per-row frequency counters."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from embedlab import ConfigError, DataIntegrityError

U32_MAX = np.iinfo(np.uint32).max

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)

_TABLE_MAGIC = b"EMBT"
_TABLE_VERSION = 1


@dataclass(frozen=True)
class HashSpec:
    feature_name: str
    bits: int
    salt: int = 0

    def __post_init__(self):
        if not 1 <= self.bits <= 31:
            raise ConfigError(f"hash bits for {self.feature_name!r} must be in [1, 31], got {self.bits}")

    @property
    def num_rows(self) -> int:
        return 1 << self.bits


def hash_id(raw_id, spec: HashSpec):
    """Map raw IDs to rows in ``[0, 2**bits)`` with a splitmix64 finalizer.

    Accepts a scalar or an integer array; returns the same shape.
    """
    scalar = np.ndim(raw_id) == 0
    x = np.atleast_1d(np.asarray(raw_id)).astype(np.uint64)
    salt = np.uint64(spec.salt & 0xFFFFFFFFFFFFFFFF)
    with np.errstate(over="ignore"):
        z = x + salt * _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        z = z ^ (z >> np.uint64(31))
    rows = (z & np.uint64(spec.num_rows - 1)).astype(np.int64)
    return int(rows[0]) if scalar else rows


@dataclass
class BatchFrequencies:
    """Occurrence counts of each row referenced by one batch (unique rows, positive counts)."""

    rows: np.ndarray
    counts: np.ndarray

    @classmethod
    def from_rows(cls, rows) -> BatchFrequencies:
        uniq, counts = np.unique(np.asarray(rows, dtype=np.int64).ravel(), return_counts=True)
        return cls(uniq, counts.astype(np.int64))

    @classmethod
    def empty(cls) -> BatchFrequencies:
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64))

    @property
    def total(self) -> int:
        return int(self.counts.sum())


class EmbeddingTable:
    """Hashed-row embedding matrix plus 32-bit occurrence counters.

    ``log_freq_max`` tracks ``max_i log(1 + freq[i])`` incrementally; counters
    only grow, so the running maximum is exact.
    """

    def __init__(self, spec: HashSpec, dim: int, *, seed: int | None = None, dtype=np.float32):
        if dim < 1:
            raise ConfigError("embedding dimension must be positive")
        self.spec = spec
        self.dim = dim
        self.weights = np.zeros((spec.num_rows, dim), dtype=dtype)
        self.freq = np.zeros(spec.num_rows, dtype=np.uint32)
        self.log_freq_max = 0.0
        self.max_freq = 0
        self.saturated = 0
        if seed is not None:
            self.initialize(seed)

    @property
    def name(self) -> str:
        return self.spec.feature_name

    @property
    def num_rows(self) -> int:
        return self.spec.num_rows

    @property
    def init_bound(self) -> float:
        return 1.0 / np.sqrt(self.dim)

    def initialize(self, seed: int) -> None:
        """Redraw every weight uniformly in [-1/sqrt(d), 1/sqrt(d)]."""
        rng = np.random.default_rng(seed)
        b = self.init_bound
        self.weights[...] = rng.uniform(-b, b, size=self.weights.shape)

    def lookup(self, rows) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.int64)
        if rows.size and (rows.min() < 0 or rows.max() >= self.num_rows):
            raise IndexError(f"row index out of range for table {self.name!r} with {self.num_rows} rows")
        return self.weights[rows]

    def accumulate_freq(self, batch: BatchFrequencies) -> None:
        if batch.rows.size == 0:
            return
        new = self.freq[batch.rows].astype(np.uint64) + batch.counts.astype(np.uint64)
        over = new > U32_MAX
        if over.any():
            self.saturated += int(over.sum())
            new[over] = U32_MAX
        self.freq[batch.rows] = new.astype(np.uint32)
        top = int(new.max())
        if top > self.max_freq:
            self.max_freq = top
            self.log_freq_max = float(np.log1p(np.float64(top)))

    def recompute_log_freq_max(self) -> float:
        return float(np.log1p(self.freq.astype(np.float64)).max())

    def reset_freq(self) -> None:
        self.freq[:] = 0
        self.max_freq = 0
        self.log_freq_max = 0.0

    @property
    def counter_nbytes(self) -> int:
        return self.freq.nbytes

    @property
    def weight_nbytes(self) -> int:
        return self.weights.nbytes

    def storage_overhead(self) -> float:
        """Counter bytes as a fraction of weight bytes (1/d for 4-byte weights)."""
        return self.counter_nbytes / self.weight_nbytes

    # -- checkpoint block -------------------------------------------------

    def save(self, path: Path) -> None:
        name = self.name.encode("utf-8")
        header = _TABLE_MAGIC + struct.pack("<IH", _TABLE_VERSION, len(name)) + name
        header += struct.pack("<IIq", self.spec.bits, self.dim, self.spec.salt)
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(self.weights.astype("<f4").tobytes())
            fh.write(self.freq.astype("<u4").tobytes())

    @classmethod
    def load(cls, path: Path, dtype=np.float32) -> EmbeddingTable:
        data = Path(path).read_bytes()
        if data[:4] != _TABLE_MAGIC:
            raise DataIntegrityError(f"{path}: not an embedding table block")
        version, name_len = struct.unpack_from("<IH", data, 4)
        if version != _TABLE_VERSION:
            raise DataIntegrityError(f"{path}: unsupported table version {version}")
        off = 10
        name = data[off:off + name_len].decode("utf-8")
        off += name_len
        bits, dim, salt = struct.unpack_from("<IIq", data, off)
        off += 16
        table = cls(HashSpec(name, bits, salt), dim, dtype=dtype)
        n = table.num_rows
        w = np.frombuffer(data, dtype="<f4", count=n * dim, offset=off)
        off += 4 * n * dim
        f = np.frombuffer(data, dtype="<u4", count=n, offset=off)
        if off + 4 * n != len(data):
            raise DataIntegrityError(f"{path}: truncated or oversized table block")
        table.weights[...] = w.reshape(n, dim)
        table.freq[...] = f
        table.max_freq = int(f.max())
        table.log_freq_max = float(np.log1p(np.float64(table.max_freq)))
        return table
