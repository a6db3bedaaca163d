"""Checkpoint files: one .npz with parameter arrays plus a JSON metadata blob."""

from __future__ import annotations

import json

import numpy as np

FORMAT_VERSION = 1


def save_checkpoint(path, state: dict, meta: dict | None = None):
    """Write arrays and metadata to ``path`` (.npz)."""
    meta = dict(meta or {})
    meta["format_version"] = FORMAT_VERSION
    arrays = {f"data:{k}": np.asarray(v) for k, v in state.items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(path):
    """Read back (state, meta) written by save_checkpoint."""
    with np.load(path) as z:
        raw = z["__meta__"].tobytes().decode()
        meta = json.loads(raw)
        if meta.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {meta.get('format_version')!r}")
        state = {k[len("data:") :]: z[k] for k in z.files if k.startswith("data:")}
    return state, meta
