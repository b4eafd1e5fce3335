"""Flat-file checkpoints: a JSON manifest plus one raw float64 buffer.

The manifest lists every named array with its shape and byte offset into
the buffer file; the buffer is the concatenation of the arrays as
little-endian 64-bit floats. A free-form `meta` dict (JSON-safe values
only) rides along in the manifest. Round-trips are bit-exact, and writes
go through a temporary name so a crash never leaves a torn checkpoint.
"""

from __future__ import annotations

import json
import os
from typing import Dict, Iterable, Tuple

import numpy as np

MANIFEST_NAME = "manifest.json"
BUFFER_NAME = "params.bin"
FORMAT_VERSION = 1
_DTYPE = "<f8"


def save_checkpoint(directory: str,
                    entries: Iterable[Tuple[str, np.ndarray]],
                    meta: dict | None = None) -> None:
    """Write named arrays and metadata to `directory`, atomically."""
    os.makedirs(directory, exist_ok=True)
    manifest_entries = []
    chunks = []
    offset = 0
    seen = set()
    for name, arr in entries:
        if name in seen:
            raise ValueError(f"duplicate checkpoint entry {name!r}")
        seen.add(name)
        arr = getattr(arr, "data", arr)   # accept Tensor or ndarray
        data = np.ascontiguousarray(arr, dtype=np.float64).astype(
            _DTYPE, copy=False)
        raw = data.tobytes()
        manifest_entries.append({
            "name": name,
            "shape": list(np.shape(arr)),
            "offset": offset,
            "size": data.size,
        })
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "version": FORMAT_VERSION,
        "dtype": _DTYPE,
        "total_bytes": offset,
        "entries": manifest_entries,
        "meta": meta or {},
    }
    buf_tmp = os.path.join(directory, BUFFER_NAME + ".tmp")
    man_tmp = os.path.join(directory, MANIFEST_NAME + ".tmp")
    with open(buf_tmp, "wb") as f:
        for raw in chunks:
            f.write(raw)
    with open(man_tmp, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1)
        f.write("\n")
    os.replace(buf_tmp, os.path.join(directory, BUFFER_NAME))
    os.replace(man_tmp, os.path.join(directory, MANIFEST_NAME))


def load_checkpoint(directory: str) -> Tuple[Dict[str, np.ndarray], dict]:
    """Read a checkpoint back as ({name: array}, meta)."""
    man_path = os.path.join(directory, MANIFEST_NAME)
    buf_path = os.path.join(directory, BUFFER_NAME)
    with open(man_path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("version") != FORMAT_VERSION:
        raise ValueError(
            f"unsupported checkpoint version {manifest.get('version')!r}"
        )
    with open(buf_path, "rb") as f:
        raw = f.read()
    if len(raw) != manifest["total_bytes"]:
        raise ValueError(
            f"buffer is {len(raw)} bytes, manifest expects "
            f"{manifest['total_bytes']}"
        )
    out = {}
    for ent in manifest["entries"]:
        flat = np.frombuffer(
            raw, dtype=_DTYPE, count=ent["size"],
            offset=ent["offset"]).astype(np.float64)
        out[ent["name"]] = flat.reshape(ent["shape"])
    return out, manifest.get("meta", {})


def load_into(named_tensors: Iterable[Tuple[str, object]],
              entries: Dict[str, np.ndarray],
              strict: bool = True) -> None:
    """Copy loaded arrays into live tensors in place, by name.

    With strict=True every tensor must have an entry and every entry a
    tensor; shapes must always match.
    """
    remaining = dict(entries)
    for name, tensor in named_tensors:
        if name not in remaining:
            if strict:
                raise KeyError(f"checkpoint is missing entry {name!r}")
            continue
        value = remaining.pop(name)
        if tuple(value.shape) != tuple(tensor.data.shape):
            raise ValueError(
                f"shape mismatch for {name!r}: checkpoint "
                f"{tuple(value.shape)}, model {tuple(tensor.data.shape)}"
            )
        tensor.data[...] = value
    if strict and remaining:
        extra = sorted(remaining)[:5]
        raise KeyError(f"checkpoint has unused entries: {extra}")
