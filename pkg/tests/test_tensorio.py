"""Tensor container: float32 payloads behind a validated binary header."""

import numpy as np
import pytest

from headlab.tensorio import (MAGIC, read_tensor, tensor_bytes,
                              tensor_from_bytes, write_tensor)


def test_roundtrip_preserves_float32_exactly():
    arr = np.linspace(-3, 3, 24, dtype=np.float64).reshape(2, 3, 4)
    blob = tensor_bytes(arr)
    back = tensor_from_bytes(blob)
    assert back.dtype == np.float32
    assert back.shape == (2, 3, 4)
    assert np.array_equal(back, arr.astype(np.float32))


def test_roundtrip_is_byte_stable():
    arr = np.float32([[1.5, -2.25], [0.0, 3e-9]])
    blob = tensor_bytes(arr)
    assert tensor_bytes(tensor_from_bytes(blob)) == blob


def test_file_roundtrip(tmp_path):
    arr = np.arange(16, dtype=np.float32).reshape(4, 4)
    path = tmp_path / "t.bin"
    write_tensor(path, arr)
    assert np.array_equal(read_tensor(path), arr)


def test_non_contiguous_input_ok():
    arr = np.arange(36, dtype=np.float32).reshape(6, 6)[::2, ::2]
    back = tensor_from_bytes(tensor_bytes(arr))
    assert np.array_equal(back, arr)


def test_header_starts_with_magic():
    blob = tensor_bytes(np.zeros(3, dtype=np.float32))
    assert blob[:4] == MAGIC


def test_rejects_bad_magic():
    blob = bytearray(tensor_bytes(np.zeros(3, dtype=np.float32)))
    blob[0] ^= 0xFF
    with pytest.raises(ValueError):
        tensor_from_bytes(bytes(blob))


def test_rejects_truncation():
    blob = tensor_bytes(np.zeros((2, 2), dtype=np.float32))
    with pytest.raises(ValueError):
        tensor_from_bytes(blob[:-1])
    with pytest.raises(ValueError):
        tensor_from_bytes(blob[:6])


def test_rejects_trailing_garbage():
    blob = tensor_bytes(np.zeros((2, 2), dtype=np.float32))
    with pytest.raises(ValueError):
        tensor_from_bytes(blob + b"\x00")


def test_rejects_unknown_version():
    blob = bytearray(tensor_bytes(np.zeros(2, dtype=np.float32)))
    blob[4] = 99  # version field follows the 4-byte magic
    with pytest.raises(ValueError):
        tensor_from_bytes(bytes(blob))


def test_rejects_unknown_dtype():
    blob = bytearray(tensor_bytes(np.zeros(2, dtype=np.float32)))
    blob[8] = 7  # dtype byte follows the u32 version
    with pytest.raises(ValueError):
        tensor_from_bytes(bytes(blob))
