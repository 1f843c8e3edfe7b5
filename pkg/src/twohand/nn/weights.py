"""Binary weights file.

Layout (little-endian)::

    b"THWT"  u32 version  u32 count
    count x { u16 name_len, name (utf-8), u8 ndim, ndim x u64 extent, float64 data }
    32-byte SHA-256 of everything above
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"THWT"
VERSION = 1


class WeightsError(ValueError):
    pass


def dumps_weights(named: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(named))]
    for name, arr in named.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        key = name.encode()
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def loads_weights(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 44 or blob[:4] != MAGIC:
        raise WeightsError("not a weights file")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise WeightsError("weights checksum mismatch")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise WeightsError(f"unsupported weights version {version}")
    pos, out = 12, {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + n].decode()
        pos += n
        (ndim,) = struct.unpack_from("<B", body, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", body, pos)
        pos += 8 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(body, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    if pos != len(body):
        raise WeightsError("trailing bytes in weights file")
    return out


def save_weights(path, named: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps_weights(named))


def load_weights(path) -> dict[str, np.ndarray]:
    return loads_weights(Path(path).read_bytes())
