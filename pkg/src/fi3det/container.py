"""FI3D binary container: a flat list of named, typed n-d arrays.

Layout (little-endian)::

    b"FI3D" | u16 version (=1) | u32 block count
    per block: u16 name length | name (UTF-8) | u8 dtype code | u8 ndim
               | ndim x u64 dims | raw C-order data

dtype codes: 0 = float32, 1 = uint8, 2 = uint32.
"""
from __future__ import annotations

import os
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"FI3D"
VERSION = 1

_CODES = {0: np.dtype("<f4"), 1: np.dtype("u1"), 2: np.dtype("<u4")}
_KINDS = {np.dtype("<f4"): 0, np.dtype("u1"): 1, np.dtype("<u4"): 2}


def _code_for(arr: np.ndarray) -> tuple[int, np.ndarray]:
    if arr.dtype == np.bool_ or arr.dtype == np.uint8:
        return 1, arr.astype("u1")
    if np.issubdtype(arr.dtype, np.floating):
        return 0, arr.astype("<f4")
    if np.issubdtype(arr.dtype, np.integer):
        if arr.size and (arr.min() < 0 or arr.max() > np.iinfo(np.uint32).max):
            raise ValueError("integer block out of uint32 range")
        return 2, arr.astype("<u4")
    raise TypeError(f"unsupported dtype {arr.dtype}")


def encode_fi3d(blocks: dict) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(blocks))]
    for name, value in blocks.items():
        arr = np.ascontiguousarray(value)
        code, arr = _code_for(arr)
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_fi3d(data: bytes) -> dict:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"truncated container: need {n} bytes at offset {pos}, have {len(view) - pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise FormatError("bad magic, expected b'FI3D'")
    version, count = struct.unpack("<HI", take(6))
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    blocks = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("block name is not UTF-8") from exc
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _CODES:
            raise FormatError(f"block {name!r}: unknown dtype code {code}")
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        dtype = _CODES[code]
        nbytes = int(np.prod(dims, dtype=np.uint64)) * dtype.itemsize
        arr = np.frombuffer(bytes(take(nbytes)), dtype=dtype).reshape(dims)
        if name in blocks:
            raise FormatError(f"duplicate block {name!r}")
        blocks[name] = arr
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after last block")
    return blocks


def write_fi3d(path, blocks: dict) -> None:
    with open(os.fspath(path), "wb") as fh:
        fh.write(encode_fi3d(blocks))


def read_fi3d(path) -> dict:
    with open(os.fspath(path), "rb") as fh:
        return decode_fi3d(fh.read())
