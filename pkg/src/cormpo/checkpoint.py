"""Versioned binary container for model checkpoints.

Layout: 4 magic bytes, little-endian uint32 format version, little-endian
uint64 manifest length, UTF-8 JSON manifest, then each tensor's float64
little-endian data in manifest order.  A copy of the manifest is written
next to the file as ``<path>.json`` so shapes are inspectable without
parsing the binary.  Everything is explicitly little-endian, so files are
identical across platforms.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1

MAGIC_TWIN = b"CTWN"
MAGIC_GUARDIAN = b"CKDE"
MAGIC_POLICY = b"CPOL"
MAGIC_ENSEMBLE = b"CENS"

_HEADER = struct.Struct("<4sIQ")


class CheckpointError(RuntimeError):
    """Raised for malformed or mismatched checkpoint files."""


def write_container(
    path: Path | str,
    magic: bytes,
    tensors: dict[str, np.ndarray],
    meta: dict | None = None,
) -> None:
    if len(magic) != 4:
        raise CheckpointError("magic must be exactly 4 bytes")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {name: np.ascontiguousarray(t, dtype="<f8") for name, t in tensors.items()}
    manifest = {
        "format": magic.decode("ascii"),
        "version": FORMAT_VERSION,
        "tensors": [{"name": name, "shape": list(a.shape)} for name, a in arrays.items()],
        "meta": meta or {},
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(_HEADER.pack(magic, FORMAT_VERSION, len(manifest_bytes)))
        fh.write(manifest_bytes)
        for a in arrays.values():
            fh.write(a.tobytes())
    sidecar = Path(str(path) + ".json")
    sidecar.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_container(
    path: Path | str, expect_magic: bytes | None = None
) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    magic, version, manifest_len = _HEADER.unpack_from(blob, 0)
    if expect_magic is not None and magic != expect_magic:
        raise CheckpointError(
            f"{path}: expected magic {expect_magic!r}, found {magic!r}"
        )
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    offset = _HEADER.size
    manifest = json.loads(blob[offset : offset + manifest_len].decode("utf-8"))
    offset += manifest_len
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(blob):
            raise CheckpointError(f"{path}: truncated tensor data for {entry['name']}")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
        tensors[entry["name"]] = arr.astype(np.float64)
        offset += nbytes
    return tensors, manifest.get("meta", {})
