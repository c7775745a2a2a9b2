"""Binary tensor checkpoints.

Layout (all integers little-endian u32, values little-endian f64)::

    b"UPRL" | version | { name_len | name (utf-8) | rank | dims... | values... }*

Records run to end of file, in insertion order, so writing the same mapping
twice yields identical bytes.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"UPRL"
VERSION = 1

__all__ = ["CheckpointError", "write_checkpoint", "read_checkpoint", "encode", "decode"]


class CheckpointError(ValueError):
    """Malformed, truncated, or wrong-version checkpoint data."""


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        if arr.ndim:
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).astype("<f8", copy=False).tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise CheckpointError("bad magic: not an UPRL checkpoint")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    out: dict[str, np.ndarray] = {}
    pos = 8
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + n].decode("utf-8")
            if len(name.encode("utf-8")) != n:
                raise CheckpointError("truncated tensor name")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", buf, pos) if rank else ()
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            nbytes = 8 * count
            if pos + nbytes > len(buf):
                raise CheckpointError(f"truncated values for tensor {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(dims)
            pos += nbytes
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    return out


def write_checkpoint(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(tensors))
    os.replace(tmp, path)


def read_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())
