"""Checkpoints: one block per embedding table, raw dense blobs, checksummed manifest."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from embedlab import DataIntegrityError
from embedlab.feature import EmbeddingTable
from embedlab.model import ToyModel


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_checkpoint(model: ToyModel, out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    (out_dir / "tables").mkdir(parents=True, exist_ok=True)
    (out_dir / "dense").mkdir(exist_ok=True)
    manifest = {"tables": [], "dense": []}
    for t in model.tables:
        p = out_dir / "tables" / f"{t.name}.emb"
        t.save(p)
        manifest["tables"].append({"name": t.name, "bits": t.spec.bits, "dim": t.dim,
                                   "file": f"tables/{p.name}", "sha256": _sha(p)})
    for name, arr in model.params.items():
        p = out_dir / "dense" / f"{name}.bin"
        dt = arr.dtype.newbyteorder("<")
        p.write_bytes(arr.astype(dt).tobytes())
        manifest["dense"].append({"name": name, "shape": list(arr.shape), "dtype": dt.str,
                                  "file": f"dense/{p.name}", "sha256": _sha(p)})
    mp = out_dir / "manifest.json"
    mp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return mp


def load_checkpoint(ckpt_dir: Path, verify: bool = True):
    """Returns (tables by name, dense params by name)."""
    ckpt_dir = Path(ckpt_dir)
    manifest = json.loads((ckpt_dir / "manifest.json").read_text())
    tables, dense = {}, {}
    for entry in manifest["tables"] + manifest["dense"]:
        p = ckpt_dir / entry["file"]
        if verify and _sha(p) != entry["sha256"]:
            raise DataIntegrityError(f"checksum mismatch for {p}")
    for entry in manifest["tables"]:
        tables[entry["name"]] = EmbeddingTable.load(ckpt_dir / entry["file"])
    for entry in manifest["dense"]:
        raw = (ckpt_dir / entry["file"]).read_bytes()
        dense[entry["name"]] = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
    return tables, dense


def restore(model: ToyModel, ckpt_dir: Path) -> None:
    tables, dense = load_checkpoint(ckpt_dir)
    for t in model.tables:
        src = tables[t.name]
        if (src.spec.bits, src.dim) != (t.spec.bits, t.dim):
            raise DataIntegrityError(f"table {t.name!r} shape differs from the checkpoint")
        t.weights[...] = src.weights
        t.freq[...] = src.freq
        t.max_freq, t.log_freq_max = src.max_freq, src.log_freq_max
    for k in model.params:
        model.params[k][...] = dense[k]
