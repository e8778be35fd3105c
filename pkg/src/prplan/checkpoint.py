"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"PRPL"                      magic
    u32  format version
    u32  config length, then that many bytes of UTF-8 JSON
    u32  tensor count
    per tensor:
        u32 name length, UTF-8 name
        u32 rows, u32 cols
        rows*cols little-endian f32 values, row-major

Vectors are stored as a single row.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError, VersioningError

MAGIC = b"PRPL"
FORMAT_VERSION = 1


def dumps(config: dict, tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    doc = json.dumps(config, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(doc)))
    buf.write(doc)
    buf.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        arr = np.asarray(t, dtype="<f4")
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise DataError(f"tensor {name!r} has {arr.ndim} dims; only matrices and vectors are stored")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<II", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def loads(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    view = memoryview(data)
    if bytes(view[:4]) != MAGIC:
        raise DataError("not a checkpoint (bad magic)")
    pos = 4

    def u32():
        nonlocal pos
        if pos + 4 > len(view):
            raise DataError("truncated checkpoint")
        (v,) = struct.unpack_from("<I", view, pos)
        pos += 4
        return v

    version = u32()
    if version != FORMAT_VERSION:
        raise VersioningError(f"checkpoint format {version}, this build reads {FORMAT_VERSION}")
    def text(n):
        nonlocal pos
        if pos + n > len(view):
            raise DataError("truncated checkpoint")
        try:
            out = bytes(view[pos:pos + n]).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DataError("corrupt checkpoint text") from exc
        pos += n
        return out

    try:
        config = json.loads(text(u32()))
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt checkpoint config: {exc}") from exc
    tensors = {}
    for _ in range(u32()):
        name = text(u32())
        rows, cols = u32(), u32()
        size = rows * cols * 4
        if pos + size > len(view):
            raise DataError(f"truncated tensor {name!r}")
        tensors[name] = np.frombuffer(view[pos:pos + size], dtype="<f4").reshape(rows, cols).astype(np.float32)
        pos += size
    if pos != len(view):
        raise DataError("trailing bytes after last tensor")
    return config, tensors


def save(path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(config, tensors))


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    p = Path(path)
    if not p.exists():
        raise DataError(f"checkpoint {p} does not exist")
    return loads(p.read_bytes())


def prefixed(prefix: str, tensors: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v for k, v in tensors.items()}


def unprefixed(prefix: str, tensors: dict[str, np.ndarray], shapes: dict[str, tuple]) -> dict[str, np.ndarray]:
    """Select ``prefix/...`` tensors and restore their in-memory shapes."""
    out = {}
    for name, shape in shapes.items():
        key = f"{prefix}/{name}"
        if key not in tensors:
            raise DataError(f"checkpoint is missing tensor {key!r}")
        out[name] = tensors[key].reshape(shape)
    return out
