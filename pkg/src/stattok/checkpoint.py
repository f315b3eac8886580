"""Binary checkpoint format.

Layout (all little-endian): magic "STK1", u32 version=1, u32 record count,
then per record: u32 name length, UTF-8 name, u32 ndim, ndim x u64 dims,
raw float32 data.  Round-trips are bit-exact and writes are atomic.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"STK1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_records(path: str, records: list[tuple[str, np.ndarray]]):
    parts = [MAGIC, struct.pack("<II", VERSION, len(records))]
    for name, arr in records:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        parts.append(arr.tobytes())
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(parts))
    os.replace(tmp, path)


def load_records(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from(f"<{ndim}Q", blob, pos) if ndim else ()
        pos += 8 * ndim
        n = 1
        for d in dims:
            n *= d
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(dims)
        pos += 4 * n
        out[name] = arr.copy()
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes")
    return out


def save_model(path: str, model, extra: dict[str, np.ndarray] | None = None):
    records = [(f"param.{name}", p.data) for name, p in model.params()]
    if extra:
        records.extend(sorted(extra.items()))
    save_records(path, records)


def load_model(path: str, model) -> dict[str, np.ndarray]:
    """Load parameters into ``model`` in place; returns the non-param records.

    A missing or shape-mismatched parameter means the checkpoint does not
    belong to this configuration.
    """
    records = load_records(path)
    for name, p in model.params():
        key = f"param.{name}"
        if key not in records:
            raise CheckpointError(f"{path}: missing parameter {name}")
        arr = records.pop(key)
        if arr.shape != p.data.shape:
            raise CheckpointError(f"{path}: parameter {name} has shape {arr.shape}, "
                                  f"model expects {p.data.shape}")
        p.data = arr.astype(p.data.dtype)
    stray = [k for k in records if k.startswith("param.")]
    if stray:
        raise CheckpointError(f"{path}: unexpected parameter(s) {', '.join(sorted(stray))}")
    return records
