"""Flat numeric vectors with double-precision reductions.

A tensor here is a one-dimensional numpy array whose dtype is either
``float64`` or ``float16``. The half-precision variant stores genuine IEEE
binary16 payloads; every arithmetic operation widens to double, computes, and
rounds back once.

Dot products are accumulated strictly left to right in double precision so
that results are bit-reproducible for a given input regardless of which
transport delivered the data.
"""

from __future__ import annotations

import struct
from typing import NamedTuple

import numba
import numpy as np

from .errors import ShapeError

F64 = np.dtype(np.float64)
F16 = np.dtype(np.float16)

DTYPE_TAGS = {F64: 0, F16: 1}
_TAG_DTYPES = {v: k for k, v in DTYPE_TAGS.items()}
_HEADER = struct.Struct("<BQ")


class DotTriple(NamedTuple):
    ab: float
    aa: float
    bb: float


def as_tensor(x, dtype=None) -> np.ndarray:
    """Coerce ``x`` into a 1-D float64 or float16 array.

    Anything that is not already a float16 array becomes float64 unless
    ``dtype`` says otherwise.
    """
    arr = np.asarray(x)
    if dtype is None:
        dtype = F16 if arr.dtype == F16 else F64
    dtype = np.dtype(dtype)
    if dtype not in DTYPE_TAGS:
        raise TypeError(f"unsupported tensor dtype {dtype}")
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1:
        raise ShapeError(f"tensors are flat vectors, got shape {arr.shape}")
    if dtype == F16 and arr.dtype != F16:
        return quantize_f16(arr)
    return arr.astype(dtype, copy=False)


def widen(t: np.ndarray) -> np.ndarray:
    """Return a float64 view (or exact copy for float16 inputs)."""
    return t if t.dtype == F64 else t.astype(F64)


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")


@numba.njit(nogil=True)
def _dot3(a, b):
    ab = 0.0
    aa = 0.0
    bb = 0.0
    for i in range(a.shape[0]):
        x = a[i]
        y = b[i]
        ab += x * y
        aa += x * x
        bb += y * y
    return ab, aa, bb


@numba.njit(nogil=True)
def _segment_dot3(a, b, starts, ends, out):
    for k in range(starts.shape[0]):
        ab = 0.0
        aa = 0.0
        bb = 0.0
        for i in range(starts[k], ends[k]):
            x = a[i]
            y = b[i]
            ab += x * y
            aa += x * x
            bb += y * y
        out[k, 0] = ab
        out[k, 1] = aa
        out[k, 2] = bb


@numba.njit(nogil=True)
def _sumsq(a):
    s = 0.0
    for i in range(a.shape[0]):
        s += a[i] * a[i]
    return s


def dot_triple(a, b) -> DotTriple:
    """Return ``(a.b, a.a, b.b)`` accumulated sequentially in double."""
    a = as_tensor(a)
    b = as_tensor(b)
    _check_pair(a, b)
    ab, aa, bb = _dot3(widen(a), widen(b))
    return DotTriple(ab, aa, bb)


def segment_dot_triples(a, b, starts, ends) -> np.ndarray:
    """Per-segment dot triples as a ``(k, 3)`` array.

    Segment ``k`` covers ``a[starts[k]:ends[k]]``.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    _check_pair(a, b)
    starts = np.ascontiguousarray(starts, dtype=np.int64)
    ends = np.ascontiguousarray(ends, dtype=np.int64)
    out = np.zeros((starts.shape[0], 3))
    _segment_dot3(widen(a), widen(b), starts, ends, out)
    return out


def squared_norm(a) -> float:
    return float(_sumsq(widen(as_tensor(a))))


def axpby(alpha: float, a, beta: float, b) -> np.ndarray:
    """Elementwise ``alpha*a + beta*b``.

    Half-precision operands are combined in double and rounded once; the
    result keeps float16 only when both inputs are float16.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    _check_pair(a, b)
    out = alpha * widen(a) + beta * widen(b)
    if a.dtype == F16 and b.dtype == F16:
        return quantize_f16(out)
    return out


def segment_axpby(ca, a, cb, b, lengths) -> np.ndarray:
    """``axpby`` with one coefficient pair per contiguous segment."""
    a = as_tensor(a)
    b = as_tensor(b)
    _check_pair(a, b)
    lengths = np.asarray(lengths, dtype=np.int64)
    ca_e = np.repeat(np.asarray(ca, dtype=F64), lengths)
    cb_e = np.repeat(np.asarray(cb, dtype=F64), lengths)
    out = ca_e * widen(a) + cb_e * widen(b)
    if a.dtype == F16 and b.dtype == F16:
        return quantize_f16(out)
    return out


def quantize_f16(t) -> np.ndarray:
    """Round to binary16, nearest-even; overflow becomes +-inf, NaN stays NaN."""
    with np.errstate(over="ignore", invalid="ignore"):
        return np.asarray(t, dtype=F64).astype(F16)


def dequantize_f16(t) -> np.ndarray:
    return np.asarray(t).astype(F64)


def has_nonfinite(t) -> bool:
    return not bool(np.isfinite(t).all())


def to_bytes(t: np.ndarray) -> bytes:
    """Serialize: 1-byte dtype tag, 8-byte LE count, LE payload."""
    t = as_tensor(t)
    payload = t.astype(t.dtype.newbyteorder("<"), copy=False).tobytes()
    return _HEADER.pack(DTYPE_TAGS[t.dtype], t.shape[0]) + payload


def from_bytes(buf) -> np.ndarray:
    buf = memoryview(buf)
    if len(buf) < _HEADER.size:
        raise ShapeError("truncated tensor header")
    tag, count = _HEADER.unpack_from(buf)
    try:
        dtype = _TAG_DTYPES[tag]
    except KeyError:
        raise ShapeError(f"unknown dtype tag {tag}") from None
    expected = _HEADER.size + count * dtype.itemsize
    if len(buf) != expected:
        raise ShapeError(f"payload is {len(buf)} bytes, header implies {expected}")
    wire = dtype.newbyteorder("<")
    return np.frombuffer(buf, dtype=wire, offset=_HEADER.size, count=count).astype(dtype)
