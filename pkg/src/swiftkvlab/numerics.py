"""Dense kernels shared by every other module.

All public functions operate on numpy arrays and are deterministic: the same
inputs produce bit-identical outputs within a process.  Dot products always
accumulate in float64 regardless of the storage precision of the operands;
results are cast back to the promoted input dtype.  Matrices are row-major,
activations are row vectors, so a projection is ``x @ W``.

FP8 here means the 4-exponent/3-mantissa byte format with exponent bias 7:
subnormals decode to (mant/8)*2^-6, normals to (1+mant/8)*2^(exp-7), and the
single NaN pattern per sign sits at exp=15, mant=7, giving a finite maximum
of 448.  Quantization is per token vector with one float32 scale.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

FP8_MAX = 448.0

_PRECISION_DTYPES = {"single": np.float32, "double": np.float64}


def dtype_of(precision: str) -> np.dtype:
    """Map a precision policy name ('single' or 'double') to a numpy dtype."""
    try:
        return np.dtype(_PRECISION_DTYPES[precision])
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}") from None


class FlopCounter:
    """Accumulates 2*m*k*n per matmul while installed via count_flops()."""

    def __init__(self) -> None:
        self.total = 0

    def add(self, flops: int) -> None:
        self.total += flops


_ACTIVE_COUNTERS: list[FlopCounter] = []


@contextmanager
def count_flops():
    """Context manager yielding a FlopCounter fed by every matmul inside."""
    counter = FlopCounter()
    _ACTIVE_COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _ACTIVE_COUNTERS.remove(counter)


def _as64(a: np.ndarray) -> np.ndarray:
    return a if a.dtype == np.float64 else a.astype(np.float64)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with float64 accumulation.

    Result dtype is the promotion of the input dtypes, so single-precision
    operands come back single even though the sums ran in double.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if _ACTIVE_COUNTERS:
        flops = 2 * a.shape[0] * a.shape[1] * b.shape[1]
        for counter in _ACTIVE_COUNTERS:
            counter.add(flops)
    out = np.matmul(_as64(a), _as64(b))
    return out.astype(np.result_type(a.dtype, b.dtype), copy=False)


def softmax_rows(a: np.ndarray) -> np.ndarray:
    """Row-wise softmax; -inf entries are allowed and get probability 0.

    A row with no finite entry has no defined distribution and is rejected
    rather than silently mapped to uniform.
    """
    a64 = _as64(np.atleast_2d(a))
    row_max = np.max(a64, axis=1, keepdims=True)
    if not np.all(np.isfinite(row_max)):
        raise ValueError("softmax row with no finite entry")
    e = np.exp(a64 - row_max)
    out = e / np.sum(e, axis=1, keepdims=True)
    out = out.reshape(np.atleast_2d(a).shape)
    return out.astype(a.dtype, copy=False)


def rmsnorm(x: np.ndarray, weight: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Root-mean-square normalization with a learned per-channel gain."""
    x2d = np.atleast_2d(x)
    if weight.ndim != 1 or weight.shape[0] != x2d.shape[1]:
        raise ValueError(
            f"rmsnorm weight length {weight.shape} does not match width {x2d.shape[1]}"
        )
    x64 = _as64(x2d)
    rms = np.sqrt(np.mean(x64 * x64, axis=1, keepdims=True) + eps)
    out = (x64 / rms) * _as64(weight)
    return out.reshape(x.shape).astype(x.dtype, copy=False)


def rope_apply(
    x: np.ndarray, positions, theta: float, head_dim: int
) -> np.ndarray:
    """Rotate consecutive channel pairs of each head by position-dependent angles.

    Pair k of a head is rotated by angle pos * theta^(-2k/head_dim).  Columns
    must be a multiple of head_dim and head_dim must be even.  Negative
    positions rotate the other way, which is also the exact inverse map.
    """
    if head_dim % 2 != 0:
        raise ValueError(f"head_dim must be even, got {head_dim}")
    x2d = np.atleast_2d(x)
    n, cols = x2d.shape
    if cols % head_dim != 0:
        raise ValueError(f"width {cols} is not a multiple of head_dim {head_dim}")
    pos = np.atleast_1d(np.asarray(positions, dtype=np.float64))
    if pos.shape[0] == 1 and n > 1:
        pos = np.broadcast_to(pos, (n,))
    if pos.shape[0] != n:
        raise ValueError(f"{pos.shape[0]} positions for {n} rows")
    half = head_dim // 2
    inv_freq = theta ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = pos[:, None] * inv_freq[None, :]
    cos = np.cos(ang)[:, None, :]
    sin = np.sin(ang)[:, None, :]
    v = _as64(x2d).reshape(n, cols // head_dim, half, 2)
    out = np.empty_like(v)
    out[..., 0] = v[..., 0] * cos - v[..., 1] * sin
    out[..., 1] = v[..., 0] * sin + v[..., 1] * cos
    return out.reshape(x.shape).astype(x.dtype, copy=False)


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine of the angle between two vectors; zero vectors are rejected."""
    u64 = _as64(np.asarray(u).ravel())
    v64 = _as64(np.asarray(v).ravel())
    if u64.shape != v64.shape:
        raise ValueError(f"cosine shape mismatch: {u64.shape} vs {v64.shape}")
    nu = np.linalg.norm(u64)
    nv = np.linalg.norm(v64)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine similarity of a zero vector is undefined")
    return float(np.dot(u64, v64) / (nu * nv))


def sample_argmax(logits: np.ndarray) -> int:
    """Greedy token choice; ties resolve to the lowest index."""
    return int(np.argmax(np.asarray(logits).ravel()))


def _build_fp8_table() -> np.ndarray:
    vals = np.empty(256, dtype=np.float64)
    for code in range(256):
        sign = -1.0 if code & 0x80 else 1.0
        exp = (code >> 3) & 0xF
        mant = code & 0x7
        if exp == 0:
            mag = (mant / 8.0) * 2.0**-6
        elif exp == 15 and mant == 7:
            mag = np.nan
        else:
            mag = (1.0 + mant / 8.0) * 2.0 ** (exp - 7)
        vals[code] = sign * mag
    return vals


FP8_CODE_VALUES = _build_fp8_table()

# Positive ladder 0 .. 448 over codes 0..126; midpoints drive nearest-value
# rounding with ties away from zero.
_FP8_POS = FP8_CODE_VALUES[:127]
_FP8_MIDPOINTS = (_FP8_POS[:-1] + _FP8_POS[1:]) / 2.0


def fp8_decode(codes: np.ndarray) -> np.ndarray:
    """Decode raw FP8 byte codes to float64 values."""
    return FP8_CODE_VALUES[np.asarray(codes, dtype=np.uint8)]


def fp8_encode(values: np.ndarray) -> np.ndarray:
    """Encode float values to the nearest representable FP8 code.

    Magnitudes are clamped to the format maximum, so no code ever decodes to
    NaN; tie magnitudes round away from zero, keeping v and -v symmetric.
    """
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot encode non-finite values to fp8")
    mag = np.minimum(np.abs(v), FP8_MAX)
    codes = np.searchsorted(_FP8_MIDPOINTS, mag, side="right").astype(np.uint8)
    codes |= np.where(np.signbit(v), np.uint8(0x80), np.uint8(0))
    return codes


def quantize_fp8_token(values: np.ndarray) -> tuple[np.ndarray, np.float32]:
    """Quantize one token vector to FP8 payload bytes plus a float32 scale.

    scale = max_abs / 448 maps the largest magnitude onto the format maximum;
    an all-zero vector gets scale 1 and a zero payload.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot quantize non-finite values")
    max_abs = float(np.max(np.abs(v))) if v.size else 0.0
    scale = np.float32(max_abs / FP8_MAX) if max_abs > 0.0 else np.float32(1.0)
    codes = fp8_encode(v / float(scale))
    return codes, scale


def dequantize_fp8_token(codes: np.ndarray, scale: np.float32) -> np.ndarray:
    """Invert quantize_fp8_token up to the format's rounding error."""
    return fp8_decode(codes) * float(scale)
