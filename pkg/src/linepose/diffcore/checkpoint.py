"""Flat binary checkpoint container.

Layout (all integers little-endian)::

    magic      4 bytes  b"LPCK"
    version    u32      currently 1
    header_len u32
    header     UTF-8 JSON object (model hyperparameters and metadata)
    n_records  u32
    n_records times:
        name_len u16, name UTF-8
        ndim     u8,  dims u32 * ndim
        payload  float32 little-endian, C order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"LPCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict, header: dict) -> None:
    blob = bytearray(MAGIC)
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    blob += struct.pack("<II", VERSION, len(head)) + head
    blob += struct.pack("<I", len(params))
    for name, arr in params.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        blob += struct.pack("<H", len(raw)) + raw
        blob += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path):
    """Return ``(params, header)``; arrays are widened to float64."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, head_len = take("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(buf[pos : pos + head_len].decode("utf-8"))
    pos += head_len
    (count,) = take("<I")
    params = {}
    for _ in range(count):
        (nlen,) = take("<H")
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        if pos + 4 * n > len(buf):
            raise CheckpointError(f"{path}: truncated payload for {name}")
        arr = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(shape)
        pos += 4 * n
        params[name] = arr.astype(np.float64)
    return params, header
