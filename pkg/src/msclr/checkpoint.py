"""Checkpoint archive: JSON header plus named little-endian float32 arrays.

Layout::

    b"MSCK" | u32 version=1 | u32 header length | UTF-8 JSON header
    | u32 array count
    | per array: u16 name length | UTF-8 name | u8 ndim | u32 * ndim dims
                 | float32 payload (C order)
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"MSCK"
VERSION = 1


class CheckpointError(Exception):
    pass


def _encode(header: Mapping, arrays: Mapping[str, np.ndarray]) -> bytes:
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(head)), head, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        key = name.encode("utf-8")
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(path: str | Path, header: Mapping, arrays: Mapping[str, np.ndarray]) -> Path:
    """Write atomically: temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_encode(header, arrays))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"{path}: checkpoint not found") from None
    try:
        if blob[:4] != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (magic {blob[:4]!r})")
        version, head_len = struct.unpack_from("<II", blob, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        off = 12
        header = json.loads(blob[off:off + head_len].decode("utf-8"))
        off += head_len
        (count,) = struct.unpack_from("<I", blob, off)
        off += 4
        arrays = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + n].decode("utf-8")
            off += n
            (ndim,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if off + 4 * size > len(blob):
                raise CheckpointError(f"{path}: truncated array {name!r}")
            arrays[name] = np.frombuffer(blob, "<f4", size, off).reshape(shape).astype(np.float32)
            off += 4 * size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint: {exc}") from None
    return header, arrays


def digest(arrays: Mapping[str, np.ndarray], prefix: str = "") -> str:
    """SHA-256 over names and float32 bytes of the arrays under ``prefix``."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        if name.startswith(prefix):
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(arrays[name], dtype="<f4").tobytes())
    return h.hexdigest()
