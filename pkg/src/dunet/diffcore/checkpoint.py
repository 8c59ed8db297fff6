"""Binary parameter checkpoints.

Layout (all integers unsigned, everything little-endian)::

    magic    8 bytes   b"DUPARAM1"
    count    u32       number of records
    record   repeated `count` times:
        name_len  u16, name  utf-8 bytes
        ndim      u8,  dims  ndim x u32
        values    prod(dims) x f64 (C order)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DUPARAM1"


class CheckpointError(ValueError):
    pass


def save_params(path, records: dict) -> None:
    path = Path(path)
    chunks = [MAGIC, struct.pack("<I", len(records))]
    for name, arr in records.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_params(path) -> dict:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a parameter checkpoint")
    pos = 8
    try:
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            values = np.frombuffer(buf, dtype="<f8", count=size, offset=pos)
            pos += 8 * size
            out[name] = values.reshape(shape).astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    if pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes after {count} records")
    return out
