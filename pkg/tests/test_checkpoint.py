"""Checkpoint files: byte-exact array round trips and version enforcement."""

from __future__ import annotations

import numpy as np
import pytest

from lineplace.nn.checkpoint import load_checkpoint, save_checkpoint


def test_round_trip_preserves_values_and_dtypes(tmp_path):
    rng = np.random.default_rng(0)
    state = {
        "w": rng.normal(size=(3, 4)).astype(np.float32),
        "b": rng.normal(size=(4,)).astype(np.float64),
        "steps": np.asarray(17),
        "mask": np.array([True, False, True]),
    }
    path = tmp_path / "net.npz"
    save_checkpoint(path, state, meta={"epoch": 3, "note": "unit"})
    loaded, meta = load_checkpoint(path)
    assert set(loaded) == set(state)
    for key, arr in state.items():
        assert loaded[key].dtype == arr.dtype
        np.testing.assert_array_equal(loaded[key], arr)
    assert meta["epoch"] == 3 and meta["note"] == "unit"
    assert meta["format_version"] == 1


def test_version_mismatch_rejected(tmp_path):
    path = tmp_path / "old.npz"
    save_checkpoint(path, {"w": np.zeros(2)})
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    import json

    meta = json.loads(arrays["__meta__"].tobytes().decode())
    meta["format_version"] = 999
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    with pytest.raises(ValueError, match="format version"):
        load_checkpoint(path)


def test_empty_state_round_trip(tmp_path):
    path = tmp_path / "empty.npz"
    save_checkpoint(path, {})
    state, meta = load_checkpoint(path)
    assert state == {}
    assert meta["format_version"] == 1
