"""Binary weight container.

Layout (all integers little-endian)::

    magic      4 bytes   b"EVFW"
    version    uint32    1
    count      uint32    number of parameters
    repeated count times:
        name_len   uint16
        name       name_len bytes, UTF-8
        ndim       uint8
        dims       ndim x uint32
        data       prod(dims) x float32 (little-endian, row-major)

Parameters are written in the order given (dicts keep insertion order).
"""
from __future__ import annotations

import struct

import numpy as np

MAGIC = b"EVFW"
VERSION = 1


class WeightFileError(ValueError):
    pass


def serialize_weights(params: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, arr in params.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise WeightFileError(f"parameter name too long: {name[:40]}...")
        if arr.ndim > 255:
            raise WeightFileError(f"{name}: too many dimensions")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def parse_weights(data: bytes) -> dict[str, np.ndarray]:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise WeightFileError(f"truncated weight file at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise WeightFileError("bad magic; not an evfuse weight file")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise WeightFileError(f"unsupported weight file version {version}")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError:
            raise WeightFileError("parameter name is not valid UTF-8") from None
        if name in params:
            raise WeightFileError(f"duplicate parameter {name!r}")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape)
        params[name] = arr.astype(np.float32)
    if pos != len(view):
        raise WeightFileError(f"{len(view) - pos} trailing bytes after last parameter")
    return params


def save_weights(path, params: dict) -> None:
    from ..io import atomic_write_bytes
    atomic_write_bytes(path, serialize_weights(params))


def load_weights(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return parse_weights(fh.read())
