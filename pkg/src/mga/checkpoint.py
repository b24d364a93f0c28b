"""Binary checkpoints (``MGAC``) holding named float64 arrays.

Layout, all integers little-endian uint32::

    b"MGAC" | version | count | count x (name_len | name utf-8 | rank | extents... | float64 data)
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable, Union

import numpy as np

from .errors import FormatError

MAGIC = b"MGAC"
VERSION = 1


def encode(items: Iterable[tuple[str, np.ndarray]]) -> bytes:
    items = list(items)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(items))]
    for name, arr in items:
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(chunks)


def decode(blob: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"{source}: truncated checkpoint at byte {pos}")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise FormatError(f"{source}: not an MGAC checkpoint")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = bytes(take(n)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        if name in out:
            raise FormatError(f"{source}: duplicate entry {name!r}")
        out[name] = data
    if pos != len(view):
        raise FormatError(f"{source}: {len(view) - pos} trailing bytes after {count} entries")
    return out


def save(path: Union[str, Path], items: Iterable[tuple[str, np.ndarray]]) -> None:
    Path(path).write_bytes(encode(items))


def load(path: Union[str, Path]) -> dict[str, np.ndarray]:
    path = Path(path)
    return decode(path.read_bytes(), str(path))


def save_network(path, net) -> None:
    save(path, net.state_items())


def load_network(path, net) -> None:
    net.load_state(load(path))
