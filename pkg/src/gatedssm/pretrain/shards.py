"""Masked-shard files: fixed-length id/label pairs in a binary format.

Layout: magic b"MSHD", u32 version, u32 sequence length, u32 sequence
count, then count*length input ids followed by count*length labels, all
little-endian int32. Labels use -1 at positions not selected for
prediction.
"""

from __future__ import annotations

import os
import struct
from typing import Tuple

import numpy as np

MAGIC = b"MSHD"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


def write_shard(path: str, input_ids: np.ndarray,
                labels: np.ndarray) -> None:
    input_ids = np.asarray(input_ids)
    labels = np.asarray(labels)
    if input_ids.ndim != 2 or input_ids.shape != labels.shape:
        raise ValueError(
            "input_ids and labels must be equal-shape 2-D arrays"
        )
    count, length = input_ids.shape
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, length, count))
        f.write(input_ids.astype("<i4").tobytes())
        f.write(labels.astype("<i4").tobytes())
    os.replace(tmp, path)


def read_shard(path: str) -> Tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: too short to be a shard file")
    magic, version, length, count = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported shard version {version}")
    body = count * length * 4
    want = _HEADER.size + 2 * body
    if len(raw) != want:
        raise ValueError(
            f"{path}: expected {want} bytes for {count}x{length}, "
            f"found {len(raw)}"
        )
    ids = np.frombuffer(raw, dtype="<i4", count=count * length,
                        offset=_HEADER.size)
    labels = np.frombuffer(raw, dtype="<i4", count=count * length,
                           offset=_HEADER.size + body)
    return (ids.reshape(count, length).astype(np.int64),
            labels.reshape(count, length).astype(np.int64))
