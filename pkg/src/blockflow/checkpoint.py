"""BFCK checkpoint container.

Layout (little-endian)::

    b"BFCK"  u32 version
    u32 len  component tag (utf-8)
    u32 len  config JSON (utf-8)
    u32 count
    count x [u32 len name | u32 ndim | ndim x u32 extent | f64 payload]

Files are written to a temporary sibling and renamed into place, so a failed
write never leaves a partial checkpoint behind.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"BFCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def encode(component: str, config: dict, tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION), _pack_str(component), _pack_str(json.dumps(config, sort_keys=True))]
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")  # tobytes() emits C order; ascontiguousarray would promote 0-d
        parts.append(_pack_str(name))
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(raw: bytes) -> tuple[str, dict, dict[str, np.ndarray]]:
    if raw[:4] != MAGIC:
        raise CheckpointError("not a BFCK checkpoint")
    pos = 4
    (version,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")

    def read_str():
        nonlocal pos
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        s = raw[pos : pos + n].decode("utf-8")
        pos += n
        return s

    component = read_str()
    config = json.loads(read_str())
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        name = read_str()
        (ndim,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(raw):
            raise CheckpointError(f"truncated payload for tensor {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).copy()
        pos += nbytes
    return component, config, tensors


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def save(path, component: str, config: dict, tensors: dict[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode(component, config, tensors))


def load(path, expect: str | None = None) -> tuple[str, dict, dict[str, np.ndarray]]:
    component, config, tensors = decode(Path(path).read_bytes())
    if expect is not None and component != expect:
        raise CheckpointError(f"{path}: expected a {expect!r} checkpoint, found {component!r}")
    return component, config, tensors
