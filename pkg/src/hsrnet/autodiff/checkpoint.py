"""HSRC checkpoint container.

Layout (all integers little-endian)::

    "HSRC" u32 version=1 u32 count
    count x [u16 name_len, utf-8 name, u8 ndim, u32 dims[ndim], f32 data]
    optional: "ADAM" u32 t u32 count, then 2*params entries in the same
              per-entry layout, named "m.<param>" and "v.<param>"
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .adam import AdamState

MAGIC = b"HSRC"
ADAM_MAGIC = b"ADAM"
VERSION = 1


class FormatError(ValueError):
    pass


def _write_entry(f: BinaryIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    f.write(struct.pack("<H", len(raw)))
    f.write(raw)
    f.write(struct.pack("<B", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(f: BinaryIO, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise FormatError("truncated checkpoint")
    return b


def _read_entry(f: BinaryIO) -> tuple[str, np.ndarray]:
    (nlen,) = struct.unpack("<H", _read_exact(f, 2))
    name = _read_exact(f, nlen).decode("utf-8")
    (ndim,) = struct.unpack("<B", _read_exact(f, 1))
    dims = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim))
    count = int(np.prod(dims, dtype=np.int64))
    data = np.frombuffer(_read_exact(f, 4 * count), dtype="<f4").reshape(dims).astype(np.float32)
    return name, data


def dumps(params: dict[str, np.ndarray], adam: AdamState | None = None) -> bytes:
    f = io.BytesIO()
    f.write(MAGIC)
    f.write(struct.pack("<II", VERSION, len(params)))
    for name, arr in params.items():
        _write_entry(f, name, arr)
    if adam is not None:
        names = [n for n in params if n in adam.m]
        f.write(ADAM_MAGIC)
        f.write(struct.pack("<II", adam.t, 2 * len(names)))
        for n in names:
            _write_entry(f, "m." + n, adam.m[n])
            _write_entry(f, "v." + n, adam.v[n])
    return f.getvalue()


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], AdamState | None]:
    """Parse a checkpoint; the returned AdamState carries moments and ``t`` only."""
    f = io.BytesIO(blob)
    if f.read(4) != MAGIC:
        raise FormatError("bad magic: not an HSRC checkpoint")
    version, count = struct.unpack("<II", _read_exact(f, 8))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        name, data = _read_entry(f)
        if name in params:
            raise FormatError(f"duplicate parameter {name!r}")
        params[name] = data
    tag = f.read(4)
    if not tag:
        return params, None
    if tag != ADAM_MAGIC:
        raise FormatError("unexpected trailing data after parameters")
    t, count = struct.unpack("<II", _read_exact(f, 8))
    state = AdamState(t=t)
    for _ in range(count):
        name, data = _read_entry(f)
        kind, _, pname = name.partition(".")
        if kind == "m":
            state.m[pname] = data
        elif kind == "v":
            state.v[pname] = data
        else:
            raise FormatError(f"bad optimizer entry {name!r}")
    return params, state


def save(path, params: dict[str, np.ndarray], adam: AdamState | None = None) -> None:
    Path(path).write_bytes(dumps(params, adam))


def load(path) -> tuple[dict[str, np.ndarray], AdamState | None]:
    return loads(Path(path).read_bytes())
