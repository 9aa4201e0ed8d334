"""Binary container format tests."""

import json

import numpy as np
import pytest

from cormpo.checkpoint import (
    CheckpointError,
    MAGIC_GUARDIAN,
    MAGIC_TWIN,
    read_container,
    write_container,
)


def test_roundtrip_exact(tmp_path):
    tensors = {
        "a": np.arange(12, dtype=np.float64).reshape(3, 4),
        "b": np.array([1.5]),
        "scalarish": np.float64(3.25).reshape(()),
    }
    path = tmp_path / "model.ckpt"
    write_container(path, MAGIC_TWIN, tensors, meta={"note": "x"})
    loaded, meta = read_container(path, expect_magic=MAGIC_TWIN)
    assert meta == {"note": "x"}
    for name, arr in tensors.items():
        np.testing.assert_array_equal(loaded[name], np.asarray(arr, dtype=np.float64))


def test_magic_mismatch(tmp_path):
    path = tmp_path / "model.ckpt"
    write_container(path, MAGIC_TWIN, {"a": np.zeros(3)})
    with pytest.raises(CheckpointError):
        read_container(path, expect_magic=MAGIC_GUARDIAN)


def test_sidecar_manifest(tmp_path):
    path = tmp_path / "model.ckpt"
    write_container(path, MAGIC_TWIN, {"w": np.zeros((2, 5))})
    manifest = json.loads((tmp_path / "model.ckpt.json").read_text())
    assert manifest["format"] == "CTWN"
    assert manifest["tensors"] == [{"name": "w", "shape": [2, 5]}]


def test_truncated_data_rejected(tmp_path):
    path = tmp_path / "model.ckpt"
    write_container(path, MAGIC_TWIN, {"w": np.zeros(100)})
    blob = path.read_bytes()
    path.write_bytes(blob[:-32])
    with pytest.raises(CheckpointError):
        read_container(path)


def test_byte_identical_rewrites(tmp_path):
    tensors = {"w": np.linspace(0, 1, 17), "v": np.ones((2, 2))}
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    write_container(p1, MAGIC_TWIN, tensors, meta={"k": 1})
    write_container(p2, MAGIC_TWIN, tensors, meta={"k": 1})
    assert p1.read_bytes() == p2.read_bytes()
