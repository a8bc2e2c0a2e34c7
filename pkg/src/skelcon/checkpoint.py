"""Binary checkpoint container.

Layout (little-endian)::

    b"SCDN" | u32 version | 32-byte config hash
    record*: u32 name_len | name (utf-8) | u32 ndim | u32 dims[ndim] | float32 payload

The final record, ``meta.crc32``, holds the CRC-32 of every preceding byte
split into two 16-bit halves so that it survives float32 storage exactly.
Readers parse and verify the whole file before returning anything.
"""
from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"SCDN"
VERSION = 1
HASH_BYTES = 32
CRC_RECORD = "meta.crc32"
_U32 = struct.Struct("<I")


def _record(name: str, array: np.ndarray) -> bytes:
    array = np.asarray(array, dtype="<f4")  # tobytes() is C-order; keeps 0-d shapes
    raw = name.encode("utf-8")
    dims = b"".join(_U32.pack(d) for d in array.shape)
    return _U32.pack(len(raw)) + raw + _U32.pack(array.ndim) + dims + array.tobytes()


def encode_checkpoint(config_hash: bytes, tensors: dict[str, np.ndarray]) -> bytes:
    if len(config_hash) != HASH_BYTES:
        raise CheckpointError(f"config hash must be {HASH_BYTES} bytes")
    parts = [MAGIC, _U32.pack(VERSION), config_hash]
    for name, array in tensors.items():
        if name == CRC_RECORD:
            raise CheckpointError(f"record name {CRC_RECORD!r} is reserved")
        parts.append(_record(name, np.asarray(array)))
    body = b"".join(parts)
    crc = zlib.crc32(body)
    return body + _record(CRC_RECORD, np.array([crc >> 16, crc & 0xFFFF], dtype=np.float32))


def decode_checkpoint(data: bytes) -> tuple[bytes, dict[str, np.ndarray]]:
    head = 4 + _U32.size + HASH_BYTES
    if len(data) < head or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic or truncated header)")
    (version,) = _U32.unpack_from(data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {VERSION}")
    config_hash = data[8:head]
    tensors: dict[str, np.ndarray] = {}
    pos = head
    crc_ok = False
    try:
        while pos < len(data):
            start = pos
            (n,) = _U32.unpack_from(data, pos)
            pos += 4
            name = data[pos:pos + n].decode("utf-8")
            if len(name.encode("utf-8")) != n:
                raise CheckpointError("truncated record name")
            pos += n
            (ndim,) = _U32.unpack_from(data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            nbytes = 4 * int(np.prod(dims, dtype=np.int64))
            if pos + nbytes > len(data):
                raise CheckpointError(f"truncated payload for {name!r}")
            array = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims)
            pos += nbytes
            if name == CRC_RECORD:
                expected = (int(array[0]) << 16) | int(array[1])
                if zlib.crc32(data[:start]) != expected or pos != len(data):
                    raise CheckpointError("checksum mismatch")
                crc_ok = True
                break
            if name in tensors:
                raise CheckpointError(f"duplicate record {name!r}")
            tensors[name] = array.astype(np.float32)
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"corrupt record at byte {pos}: {exc}") from None
    if not crc_ok:
        raise CheckpointError("missing checksum record (file truncated?)")
    return config_hash, tensors


def write_checkpoint(path, config_hash: bytes, tensors: dict[str, np.ndarray]) -> None:
    """Write atomically: a crash never leaves a half-written file under ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(config_hash, tensors))
    os.replace(tmp, path)


def read_checkpoint(path, expected_hash: bytes | None = None) -> tuple[bytes, dict[str, np.ndarray]]:
    config_hash, tensors = decode_checkpoint(Path(path).read_bytes())
    if expected_hash is not None and config_hash != expected_hash:
        raise CheckpointError(
            f"config hash mismatch: checkpoint {config_hash.hex()[:16]}..., "
            f"expected {expected_hash.hex()[:16]}...")
    return config_hash, tensors


def bytes_to_tensor(blob: bytes) -> np.ndarray:
    return np.frombuffer(blob, dtype=np.uint8).astype(np.float32)


def tensor_to_bytes(array: np.ndarray) -> bytes:
    return np.asarray(array).astype(np.uint8).tobytes()
