"""Binary tensor container for network weights and optimizer state.

Layout (all integers little-endian):

    magic   5 bytes  b"MELW1"
    count   uint32
    per tensor:
        name_len  uint16
        name      name_len bytes, UTF-8
        rank      uint8
        extents   rank * uint32
        payload   prod(extents) * float32, little-endian

Round trips are byte-exact for float32 arrays; names must be unique.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MELW1"


class WeightsFormatError(ValueError):
    pass


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    names = list(tensors)
    if len(set(names)) != len(names):
        raise WeightsFormatError("tensor names must be unique")
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", len(names))
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        encoded = name.encode("utf-8")
        buf += struct.pack("<H", len(encoded))
        buf += encoded
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    Path(path).write_bytes(bytes(buf))


def read_tensors(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise WeightsFormatError(f"truncated weights file {path}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(5)) != MAGIC:
        raise WeightsFormatError(f"{path} is not a weights file (bad magic)")
    (count,) = struct.unpack("<I", take(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        if name in out:
            raise WeightsFormatError(f"duplicate tensor name {name!r}")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        n_items = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = take(4 * n_items)
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    if pos != len(view):
        raise WeightsFormatError(f"{path} has {len(view) - pos} trailing bytes")
    return out
