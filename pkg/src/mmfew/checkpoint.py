"""Binary checkpoint format.

Layout (all integers little-endian):
    magic     8 bytes  b"MMFWCKPT"
    version   u32      (currently 1)
    algo      u16 length + utf-8 bytes
    digest    u16 length + utf-8 bytes (config digest, hex)
    count     u32      number of tensors
    per tensor: name (u16 length + utf-8), rank u8, dims u32 each,
                payload float64 little-endian
    sha256    32 bytes over everything above

Round-trips are bit-exact; a corrupted file fails the trailing checksum.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MMFWCKPT"
VERSION = 1


class CheckpointError(Exception):
    pass


class ChecksumMismatch(CheckpointError):
    pass


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def save_checkpoint(path, algo: str, config_digest: str, tensors: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<I", VERSION), _pack_str(algo), _pack_str(config_digest)]
    parts.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=np.float64)
        parts.append(_pack_str(name))
        parts.append(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            parts.append(struct.pack("<I", d))
        parts.append(arr.astype("<f8").tobytes())
    blob = b"".join(parts)
    blob += hashlib.sha256(blob).digest()
    Path(path).write_bytes(blob)


def load_checkpoint(path) -> tuple[str, str, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 4 + 32:
        raise CheckpointError("file too short to be a checkpoint")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumMismatch("checkpoint is corrupt (checksum mismatch)")
    view = memoryview(body)
    if bytes(view[:8]) != MAGIC:
        raise CheckpointError("bad magic")
    pos = 8
    (version,) = struct.unpack_from("<I", view, pos)
    pos += 4
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")

    def read_str():
        nonlocal pos
        (n,) = struct.unpack_from("<H", view, pos)
        pos += 2
        s = bytes(view[pos : pos + n]).decode("utf-8")
        pos += n
        return s

    algo = read_str()
    config_digest = read_str()
    (count,) = struct.unpack_from("<I", view, pos)
    pos += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = read_str()
        (rank,) = struct.unpack_from("<B", view, pos)
        pos += 1
        dims = tuple(struct.unpack_from(f"<{rank}I", view, pos)) if rank else ()
        pos += 4 * rank
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(view, dtype="<f8", count=n, offset=pos).reshape(dims)
        pos += 8 * n
        tensors[name] = arr.astype(np.float64)
    return algo, config_digest, tensors
