"""Flat named-tensor checkpoint format.

Layout: magic "SKRC", u32 version, u32 tensor count, then per tensor a u32
name length, the UTF-8 name, u32 ndim, u32 dims, and the row-major payload as
little-endian float32. Everything stored (parameters, memory proxies,
optimizer moments, counters) is representable in float32.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

_MAGIC = b"SKRC"
_VERSION = 1


class CheckpointError(Exception):
    """Raised when a checkpoint cannot be written, read, or applied."""


def save_named_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [_MAGIC, struct.pack("<II", _VERSION, len(tensors))]
    for name, arr in tensors.items():
        src = np.asarray(arr)
        # ascontiguousarray promotes 0-d to (1,); keep the true shape
        data = np.ascontiguousarray(src, dtype="<f4").reshape(src.shape)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes())
    path.write_bytes(b"".join(chunks))


def load_named_tensors(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != _MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {_MAGIC!r}")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        try:
            (name_len,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            payload = raw[pos : pos + 4 * n]
            if len(payload) != 4 * n:
                raise CheckpointError(
                    f"{path}: tensor {name!r} truncated at byte {pos} "
                    f"({len(payload)} of {4 * n} payload bytes)"
                )
            pos += 4 * n
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
        except struct.error:
            raise CheckpointError(f"{path}: truncated at tensor {i} (byte {pos})") from None
    return out
