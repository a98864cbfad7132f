"""Binary weights container (``.futw``).

Layout, little-endian throughout::

    b"FUTU"  u32 version  u32 count
    count x { u32 name_len, name (UTF-8), u32 rank, rank x u32 dim, float32 payload }
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from ._fs import atomic_write_bytes

MAGIC = b"FUTU"
VERSION = 1


class WeightsError(ValueError):
    """Base class for container decoding failures."""


class BadMagicError(WeightsError):
    pass


class VersionMismatchError(WeightsError):
    pass


class SizeMismatchError(WeightsError):
    pass


def encode_weights(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(getattr(arr, "data", arr))
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_weights(buf: bytes) -> dict[str, np.ndarray]:
    view = memoryview(buf)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise SizeMismatchError(f"truncated container: need {n} bytes for {what} at offset {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if len(view) < 4 or bytes(view[:4]) != MAGIC:
        raise BadMagicError(f"not a weights container (magic {bytes(view[:4])!r})")
    pos = 4
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise VersionMismatchError(f"container version {version}, expected {VERSION}")
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        (nlen,) = struct.unpack("<I", take(4, f"name length of tensor {i}"))
        name = bytes(take(nlen, f"name of tensor {i}")).decode("utf-8")
        if name in out:
            raise WeightsError(f"duplicate tensor name {name!r}")
        (rank,) = struct.unpack("<I", take(4, f"rank of {name}"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name}"))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = take(4 * n, f"payload of {name}")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(view):
        raise SizeMismatchError(f"{len(view) - pos} trailing bytes after {count} tensors")
    return out


def save_weights(tensors: Mapping[str, np.ndarray], path: str | os.PathLike) -> None:
    atomic_write_bytes(path, encode_weights(tensors))


def load_weights(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return decode_weights(Path(path).read_bytes())
