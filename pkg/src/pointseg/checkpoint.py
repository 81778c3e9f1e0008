"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    magic    8 bytes  b"PSEGCKPT"
    version  1 byte   (currently 1)
    meta     u32 length + UTF-8 JSON (free-form, e.g. the network config)
    count    u32
    per parameter:
        name   u16 length + UTF-8
        ndim   u8
        dims   ndim x u32
        values prod(dims) x float64
"""
from __future__ import annotations

import json
import struct
from typing import Dict, Mapping, Tuple

import numpy as np

from .errors import FormatError

MAGIC = b"PSEGCKPT"
VERSION = 1


def dumps(params: Mapping[str, np.ndarray], meta: dict = None) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<B", VERSION)
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(blob)) + blob
    out += struct.pack("<I", len(params))
    for name, value in params.items():
        arr = np.asarray(getattr(value, "data", value), dtype="<f8")
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr).tobytes()
    return bytes(out)


def loads(data: bytes) -> Tuple[Dict[str, np.ndarray], dict]:
    if data[:len(MAGIC)] != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise FormatError("truncated checkpoint")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    (version,) = take("<B")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (meta_len,) = take("<I")
    if pos + meta_len > len(data):
        raise FormatError("truncated checkpoint metadata")
    try:
        meta = json.loads(data[pos:pos + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, ValueError):
        raise FormatError("checkpoint metadata is not valid JSON") from None
    pos += meta_len
    (count,) = take("<I")
    params = {}
    for _ in range(count):
        (name_len,) = take("<H")
        try:
            name = data[pos:pos + name_len].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("checkpoint parameter name is not UTF-8") from None
        pos += name_len
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        if pos + 8 * n > len(data):
            raise FormatError(f"truncated values for {name!r}")
        params[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after checkpoint")
    return params, meta


def save(path, params, meta=None):
    with open(path, "wb") as f:
        f.write(dumps(params, meta))


def load(path):
    with open(path, "rb") as f:
        return loads(f.read())
