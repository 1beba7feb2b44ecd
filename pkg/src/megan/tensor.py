"""Tensor conventions, the MGT1 raw tensor format and shared error types.

Tensors are plain ``numpy.ndarray`` objects in row-major order. Feature maps
are ``N x C x H x W``; frame sequences add a leading time axis
(``T x N x C x H x W``). Float64 is the reference precision.
"""
from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

MAGIC = b"MGT1"
DTYPE_F32 = 0
DTYPE_F64 = 1
MAX_RANK = 5

_CODE_TO_DTYPE = {DTYPE_F32: np.dtype("<f4"), DTYPE_F64: np.dtype("<f8")}


class MeganError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(MeganError, ValueError):
    """An input tensor has the wrong shape."""


class FormatError(MeganError):
    """A serialized tensor or checkpoint is malformed."""


class MagicMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


def check_dim(name: str, actual: int, expected: int) -> None:
    if actual != expected:
        raise ShapeError(f"{name}: expected {expected}, got {actual}")


def check_rank(name: str, x: np.ndarray, rank: int) -> None:
    if x.ndim != rank:
        raise ShapeError(f"{name}: expected rank {rank}, got shape {x.shape}")


@dataclass(frozen=True)
class ConvSpec:
    kernel_h: int
    kernel_w: int
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        if self.kernel_h < 1 or self.kernel_w < 1 or self.stride < 1 or self.pad < 0:
            raise ValueError(f"invalid convolution spec {self}")

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        ho = (h + 2 * self.pad - self.kernel_h) // self.stride + 1
        wo = (w + 2 * self.pad - self.kernel_w) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(
                f"input {h}x{w} too small for kernel {self.kernel_h}x{self.kernel_w} "
                f"with pad {self.pad}"
            )
        return ho, wo


def reference_dtype() -> np.dtype:
    """Storage precision selected by ``MEGAN_REFERENCE_PRECISION`` (f64 default)."""
    value = os.environ.get("MEGAN_REFERENCE_PRECISION", "f64").lower()
    if value == "f64":
        return np.dtype(np.float64)
    if value == "f32":
        return np.dtype(np.float32)
    raise MeganError(f"MEGAN_REFERENCE_PRECISION must be f64 or f32, got {value!r}")


def write_tensor(fh: BinaryIO, x: np.ndarray, dtype=None) -> None:
    """Write one MGT1 blob to an open binary stream."""
    x = np.asarray(x)
    if dtype is None:
        dtype = np.float32 if x.dtype == np.float32 else np.float64
    dtype = np.dtype(dtype)
    if dtype == np.float32:
        code = DTYPE_F32
    elif dtype == np.float64:
        code = DTYPE_F64
    else:
        raise FormatError(f"unsupported dtype {dtype}")
    if x.ndim > MAX_RANK:
        raise ShapeError(f"rank {x.ndim} exceeds maximum {MAX_RANK}")
    fh.write(MAGIC)
    fh.write(struct.pack("<BB", code, x.ndim))
    fh.write(struct.pack(f"<{x.ndim}I", *x.shape))
    fh.write(np.ascontiguousarray(x, dtype=_CODE_TO_DTYPE[code]).tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"expected {n} bytes, got {len(buf)}")
    return buf


def read_tensor(fh: BinaryIO) -> np.ndarray:
    """Read one MGT1 blob; the result is always float64."""
    magic = fh.read(4)
    if magic != MAGIC:
        if len(magic) < 4:
            raise TruncatedFileError("missing tensor header")
        raise MagicMismatchError(f"bad magic {magic!r}, expected {MAGIC!r}")
    code, rank = struct.unpack("<BB", _read_exact(fh, 2))
    if code not in _CODE_TO_DTYPE:
        raise FormatError(f"unknown dtype code {code}")
    if rank > MAX_RANK:
        raise FormatError(f"rank {rank} exceeds maximum {MAX_RANK}")
    dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
    dtype = _CODE_TO_DTYPE[code]
    count = int(np.prod(dims, dtype=np.int64))
    payload = _read_exact(fh, count * dtype.itemsize)
    return np.frombuffer(payload, dtype=dtype).astype(np.float64).reshape(dims)


def tensor_to_bytes(x: np.ndarray, dtype=None) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, x, dtype)
    return buf.getvalue()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    buf = io.BytesIO(data)
    x = read_tensor(buf)
    if buf.read(1):
        raise FormatError("trailing bytes after tensor payload")
    return x


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_tensor(path, x: np.ndarray, dtype=None) -> None:
    """Atomic MGT1 file; storage precision defaults to ``MEGAN_REFERENCE_PRECISION``."""
    atomic_write_bytes(path, tensor_to_bytes(x, reference_dtype() if dtype is None else dtype))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())
