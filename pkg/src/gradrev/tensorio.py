"""Named-tensor binary container used for checkpoints and dataset samples.

Layout (all integers little-endian)::

    b"GRDA" | u32 version | u32 count
    count x ( u16 name_len | name (utf-8) | u8 dtype | u8 ndim | u32 dims[ndim] | payload )

Payloads are row-major.  Dtype codes: 0 = float64, 1 = uint8, 2 = int64.
"""
from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

from .errors import FormatError, VersionError

MAGIC = b"GRDA"
VERSION = 1
DTYPES = {0: np.dtype("<f8"), 1: np.dtype("u1"), 2: np.dtype("<i8")}
_CODES = {np.dtype("float64"): 0, np.dtype("uint8"): 1, np.dtype("int64"): 2}


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise TypeError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"tensor {name!r}: name or rank too large")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack(f"<BB{arr.ndim}I", code, arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    return b"".join(chunks)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    view = memoryview(buf)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"truncated file: needed {n} bytes at offset {pos}, "
                              f"only {len(view) - pos} left")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise FormatError("bad magic: not a GRDA tensor file")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise VersionError(f"unsupported format version {version} (expected {VERSION})")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"tensor name at offset {pos - name_len} is not utf-8") from None
        code, ndim = struct.unpack("<BB", take(2))
        if code not in DTYPES:
            raise FormatError(f"tensor {name!r}: unknown dtype code {code}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dtype = DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64))
        payload = take(size * dtype.itemsize)
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}")
        out[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after the last tensor")
    return out


def save(path, tensors: Mapping[str, np.ndarray]) -> None:
    data = encode(tensors)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode(fh.read())
