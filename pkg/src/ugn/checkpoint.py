"""Binary checkpoint container.

Layout (all integers unsigned 32-bit little-endian)::

    b"UGN1" | entry count | entries...
    entry: name length | UTF-8 name | rank | extents[rank] | float32 LE values
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Iterable, Tuple

import numpy as np

MAGIC = b"UGN1"
CONFIG_ENTRY = "config"


class CheckpointError(ValueError):
    pass


def dumps(entries: Iterable[Tuple[str, np.ndarray]]) -> bytes:
    entries = list(entries)
    names = [n for n, _ in entries]
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate entry names")
    out = [MAGIC, struct.pack("<I", len(entries))]
    for name, arr in entries:
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def loads(buf: bytes) -> Dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise CheckpointError("not a UGN1 checkpoint")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError("truncated checkpoint")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    (count,) = take("<I")
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = take("<I")
        shape = take(f"<{rank}I")
        n = int(np.prod(shape)) if rank else 1
        if pos + 4 * n > len(buf):
            raise CheckpointError(f"entry {name!r} is truncated")
        out[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * n
    if pos != len(buf):
        raise CheckpointError("trailing bytes after last entry")
    return out


def save(path, entries: Iterable[Tuple[str, np.ndarray]]) -> None:
    Path(path).write_bytes(dumps(entries))


def load(path) -> Dict[str, np.ndarray]:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"checkpoint {p} not found")
    return loads(p.read_bytes())


def text_entry(text: str) -> Tuple[str, np.ndarray]:
    """Store text (the config snapshot) as one float32 value per UTF-8 byte."""
    return CONFIG_ENTRY, np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def entry_text(arr: np.ndarray) -> str:
    return arr.astype(np.uint8).tobytes().decode("utf-8")
