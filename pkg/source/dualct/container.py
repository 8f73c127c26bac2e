"""
CTDL binary container.

Layout (all little-endian):
    magic "CTDL" | version u32 | dtype code u8 (0 = float32) | ndim u8 |
    ndim x u32 dims | row-major float32 payload
"""
import os
import struct

import numpy as np

from .dualct_error import ContainerFormatError

MAGIC = b"CTDL"
VERSION = 1
DTYPE_FLOAT32 = 0
MAX_DIMS = 8

_HEADER = struct.Struct("<4sIBB")


def encode_container(values) -> bytes:
    values = np.asarray(values)
    if values.ndim < 1 or values.ndim > MAX_DIMS:
        raise ContainerFormatError("<memory>", f"unsupported number of dims {values.ndim}")
    payload = np.ascontiguousarray(values, dtype="<f4")
    header = _HEADER.pack(MAGIC, VERSION, DTYPE_FLOAT32, values.ndim)
    dims = struct.pack(f"<{values.ndim}I", *values.shape)
    return header + dims + payload.tobytes()


def decode_container(data: bytes, path="<memory>", expected_shape=None, allow_nan=False) -> np.ndarray:
    if len(data) < _HEADER.size:
        raise ContainerFormatError(path, "truncated header")
    magic, version, dtype_code, ndim = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ContainerFormatError(path, f"bad magic {magic!r}")
    if version != VERSION:
        raise ContainerFormatError(path, f"unsupported version {version}")
    if dtype_code != DTYPE_FLOAT32:
        raise ContainerFormatError(path, f"unsupported dtype code {dtype_code}")
    if ndim < 1 or ndim > MAX_DIMS:
        raise ContainerFormatError(path, f"unsupported number of dims {ndim}")

    offset = _HEADER.size + 4 * ndim
    if len(data) < offset:
        raise ContainerFormatError(path, "truncated dims")
    dims = struct.unpack_from(f"<{ndim}I", data, _HEADER.size)
    expected_bytes = int(np.prod(dims, dtype=np.int64)) * 4
    if len(data) - offset != expected_bytes:
        raise ContainerFormatError(path, f"payload is {len(data) - offset} bytes, dims {dims} need {expected_bytes}")
    if expected_shape is not None and tuple(dims) != tuple(expected_shape):
        raise ContainerFormatError(path, f"dims {tuple(dims)} do not match expected {tuple(expected_shape)}")

    values = np.frombuffer(data, dtype="<f4", offset=offset).reshape(dims).astype(np.float32)
    if not allow_nan and not np.all(np.isfinite(values)):
        raise ContainerFormatError(path, "payload contains non-finite values")
    return values


def write_container(path, values):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(encode_container(values))


def read_container(path, expected_shape=None, allow_nan=False) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise ContainerFormatError(path, "cannot read file", e)
    return decode_container(data, path, expected_shape, allow_nan)
