import hashlib
import struct
import zlib

import numpy as np
import pytest

from skelcon.checkpoint import (
    CRC_RECORD, bytes_to_tensor, decode_checkpoint, encode_checkpoint, read_checkpoint,
    tensor_to_bytes, write_checkpoint,
)
from skelcon.errors import CheckpointError

HASH = hashlib.sha256(b"config").digest()


def tensors():
    rng = np.random.default_rng(0)
    return {"a.weight": rng.normal(size=(3, 4)).astype(np.float32),
            "a.bias": np.arange(4, dtype=np.float32),
            "scalar": np.array(2.5, dtype=np.float32)}


def test_roundtrip_bit_exact():
    h, back = decode_checkpoint(encode_checkpoint(HASH, tensors()))
    assert h == HASH
    assert list(back) == list(tensors())
    for name, arr in tensors().items():
        assert back[name].shape == arr.shape
        assert back[name].tobytes() == arr.tobytes()


def test_layout():
    blob = encode_checkpoint(HASH, {"x": np.array([1.0, 2.0], dtype=np.float32)})
    assert blob[:4] == b"SCDN"
    assert struct.unpack_from("<I", blob, 4)[0] == 1
    assert blob[8:40] == HASH
    # first record: name length, name, ndim, dims, payload
    assert struct.unpack_from("<I", blob, 40)[0] == 1
    assert blob[44:45] == b"x"
    assert struct.unpack_from("<II", blob, 45) == (1, 2)
    assert struct.unpack_from("<2f", blob, 53) == (1.0, 2.0)
    # the trailer record carries the CRC of everything before it
    body_end = 61
    crc = zlib.crc32(blob[:body_end])
    name_len = struct.unpack_from("<I", blob, body_end)[0]
    assert blob[body_end + 4:body_end + 4 + name_len].decode() == CRC_RECORD
    hi, lo = struct.unpack_from("<2f", blob, len(blob) - 8)
    assert (int(hi) << 16) | int(lo) == crc


@pytest.mark.parametrize("offset", [0, 5, 20, 50, -30, -3])
def test_any_flipped_byte_is_rejected(offset):
    blob = bytearray(encode_checkpoint(HASH, tensors()))
    blob[offset] ^= 0x40
    with pytest.raises(CheckpointError):
        decode_checkpoint(bytes(blob))


@pytest.mark.parametrize("cut", [3, 39, 60, 100, -1])
def test_truncation_is_rejected(cut):
    blob = encode_checkpoint(HASH, tensors())
    with pytest.raises(CheckpointError):
        decode_checkpoint(blob[:cut])


def test_trailing_garbage_is_rejected():
    with pytest.raises(CheckpointError):
        decode_checkpoint(encode_checkpoint(HASH, tensors()) + b"\x00\x00")


def test_hash_mismatch_refused(tmp_path):
    path = tmp_path / "m.ckpt"
    write_checkpoint(path, HASH, tensors())
    read_checkpoint(path, HASH)
    with pytest.raises(CheckpointError, match="hash mismatch"):
        read_checkpoint(path, hashlib.sha256(b"other").digest())


def test_atomic_write_leaves_no_temp(tmp_path):
    path = tmp_path / "m.ckpt"
    write_checkpoint(path, HASH, tensors())
    write_checkpoint(path, HASH, {"only": np.zeros(1, dtype=np.float32)})
    assert sorted(p.name for p in tmp_path.iterdir()) == ["m.ckpt"]
    assert list(read_checkpoint(path)[1]) == ["only"]


def test_reserved_name_and_bad_hash():
    with pytest.raises(CheckpointError):
        encode_checkpoint(HASH, {CRC_RECORD: np.zeros(2, dtype=np.float32)})
    with pytest.raises(CheckpointError):
        encode_checkpoint(b"short", {})


def test_bytes_tensor_roundtrip():
    blob = '{"k": "välue"}'.encode()
    assert tensor_to_bytes(bytes_to_tensor(blob)) == blob
