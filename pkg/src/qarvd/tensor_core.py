"""Dense tensor helpers and the ``QTNS`` binary tensor format.

Float tensors are plain ``float64`` numpy arrays. Integer codes travel as
:class:`IntTensor`, which knows its bit-width and how to pack itself.
Weight matrices are stored ``[d_out, d_in]``: input channels are columns.
"""

from __future__ import annotations

import contextlib
import io
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import _kernels

MAGIC = b"QTNS"
VERSION = 1
DTYPE_F64 = 0
DTYPE_F32 = 1
DTYPE_INT = 2

SUPPORTED_BITS = (4, 6, 8)

_strict = os.environ.get("QARVD_STRICT", "1") != "0"


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible."""


class TensorFormatError(ValueError):
    """Raised when a serialized tensor cannot be decoded."""


def is_strict():
    return _strict


def set_strict(enabled):
    global _strict
    _strict = bool(enabled)


@contextlib.contextmanager
def strict_mode(enabled=True):
    """Temporarily switch between fixed-order matmul and BLAS."""
    previous = _strict
    set_strict(enabled)
    try:
        yield
    finally:
        set_strict(previous)


def as_tensor(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def matmul(a, b):
    """Matrix product with k-ascending accumulation in strict mode.

    Strict mode (the default, ``QARVD_STRICT=1``) gives results that are
    bit-identical to a naive triple loop on every backend and thread
    count. Non-strict mode hands off to BLAS.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    if _strict:
        return _kernels.matmul_strict(a, b)
    return a @ b


def frobenius_sq_distance(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = (a - b).ravel()
    return float(np.dot(d, d))


def channel_l2_norms(w, axis=1):
    """L2 norm of every input channel of ``w``.

    ``axis`` names the channel axis; the norm reduces over the other one.
    With the default ``axis=1`` a ``[d_out, d_in]`` weight yields ``d_in``
    norms.
    """
    w = as_tensor(w)
    if w.ndim != 2:
        raise DimensionError(f"channel_l2_norms needs a 2-D tensor, got shape {w.shape}")
    if axis not in (0, 1, -1, -2):
        raise DimensionError(f"invalid channel axis {axis}")
    if axis in (0, -2):
        w = np.ascontiguousarray(w.T)
    return _kernels.channel_l2_norms(w)


def qrange(bits, symmetric=True):
    if bits not in SUPPORTED_BITS:
        raise ValueError(f"bit-width must be one of {SUPPORTED_BITS}, got {bits}")
    if symmetric:
        q = 2 ** (bits - 1) - 1
        return -q, q
    return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1


@dataclass(frozen=True)
class IntTensor:
    """Integer codes of a declared bit-width."""

    data: np.ndarray
    bits: int
    q_min: int | None = None
    q_max: int | None = None

    def __post_init__(self):
        if self.bits not in SUPPORTED_BITS:
            raise ValueError(f"bit-width must be one of {SUPPORTED_BITS}, got {self.bits}")
        data = np.ascontiguousarray(self.data)
        if not np.issubdtype(data.dtype, np.integer):
            raise TypeError(f"IntTensor needs integer data, got {data.dtype}")
        lo, hi = qrange(self.bits, symmetric=False)
        q_min = lo if self.q_min is None else self.q_min
        q_max = hi if self.q_max is None else self.q_max
        if data.size and (data.min() < q_min or data.max() > q_max):
            raise ValueError(f"codes outside [{q_min}, {q_max}] for {self.bits}-bit tensor")
        object.__setattr__(self, "data", data.astype(np.int8 if self.bits <= 8 else np.int16))
        object.__setattr__(self, "q_min", q_min)
        object.__setattr__(self, "q_max", q_max)

    @property
    def shape(self):
        return self.data.shape

    def packed(self):
        return pack_codes(self.data, self.bits)

    @classmethod
    def from_packed(cls, buf, bits, shape):
        return cls(unpack_codes(buf, bits, shape), bits)


def pack_codes(codes, bits):
    """Pack signed codes; 4-bit goes two per byte, low nibble first."""
    flat = np.ascontiguousarray(codes, dtype=np.int64).ravel()
    if bits == 4:
        nib = (flat & 0xF).astype(np.uint8)
        if nib.size % 2:
            nib = np.concatenate([nib, np.zeros(1, dtype=np.uint8)])
        return (nib[0::2] | (nib[1::2] << 4)).tobytes()
    return flat.astype(np.int8).tobytes()


def unpack_codes(buf, bits, shape):
    count = int(np.prod(shape, dtype=np.int64))
    raw = np.frombuffer(buf, dtype=np.uint8)
    if bits == 4:
        if raw.size != (count + 1) // 2:
            raise TensorFormatError(f"expected {(count + 1) // 2} packed bytes, got {raw.size}")
        nib = np.empty(raw.size * 2, dtype=np.int16)
        nib[0::2] = raw & 0xF
        nib[1::2] = raw >> 4
        nib = np.where(nib >= 8, nib - 16, nib)[:count]
        return nib.astype(np.int8).reshape(shape)
    if raw.size != count:
        raise TensorFormatError(f"expected {count} bytes, got {raw.size}")
    return raw.view(np.int8).copy().reshape(shape)


def packed_nbytes(count, bits):
    return (count + 1) // 2 if bits == 4 else count


def tensor_to_bytes(t, dtype="f64"):
    """Serialize a float array or :class:`IntTensor` to ``QTNS`` bytes."""
    buf = io.BytesIO()
    write_tensor(buf, t, dtype=dtype)
    return buf.getvalue()


def write_tensor(fp, t, dtype="f64"):
    if isinstance(t, IntTensor):
        header = struct.pack("<4sHBBB", MAGIC, VERSION, DTYPE_INT, t.bits, t.data.ndim)
        payload = t.packed()
        shape = t.shape
    else:
        arr = np.asarray(t)
        if dtype == "f64":
            code, payload = DTYPE_F64, arr.astype("<f8").tobytes()
        elif dtype == "f32":
            code, payload = DTYPE_F32, arr.astype("<f4").tobytes()
        else:
            raise ValueError(f"unknown float dtype {dtype!r}")
        header = struct.pack("<4sHBB", MAGIC, VERSION, code, arr.ndim)
        shape = arr.shape
    fp.write(header)
    fp.write(struct.pack(f"<{len(shape)}Q", *shape))
    fp.write(payload)


def read_tensor(fp):
    """Read one tensor; returns a float64 array or an :class:`IntTensor`."""
    head = fp.read(7)
    if len(head) != 7:
        raise TensorFormatError("truncated tensor header")
    magic, version, code = struct.unpack("<4sHB", head)
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise TensorFormatError(f"unsupported tensor version {version}")
    bits = None
    if code == DTYPE_INT:
        bits = struct.unpack("<B", fp.read(1))[0]
    elif code not in (DTYPE_F64, DTYPE_F32):
        raise TensorFormatError(f"unknown dtype code {code}")
    (rank,) = struct.unpack("<B", fp.read(1))
    shape = struct.unpack(f"<{rank}Q", fp.read(8 * rank))
    count = int(np.prod(shape, dtype=np.int64))
    if code == DTYPE_INT:
        nbytes = packed_nbytes(count, bits)
        buf = fp.read(nbytes)
        if len(buf) != nbytes:
            raise TensorFormatError("truncated tensor payload")
        return IntTensor.from_packed(buf, bits, shape)
    itemsize = 8 if code == DTYPE_F64 else 4
    buf = fp.read(itemsize * count)
    if len(buf) != itemsize * count:
        raise TensorFormatError("truncated tensor payload")
    arr = np.frombuffer(buf, dtype="<f8" if code == DTYPE_F64 else "<f4")
    return arr.astype(np.float64).reshape(shape)


def tensor_from_bytes(buf):
    return read_tensor(io.BytesIO(buf))


def save_tensor(path, t, dtype="f64"):
    with open(path, "wb") as fp:
        write_tensor(fp, t, dtype=dtype)


def load_tensor(path):
    with open(path, "rb") as fp:
        return read_tensor(fp)
