"""Deterministic numeric substrate: flat buffers, counter-based Gaussian
sampling with O(1) capturable state, and low-bit storage codecs.

Random draws are addressed by absolute position in a (seed, stream) keyed
sequence, so any subsequence can be regenerated from a 24-byte state.
Gaussian sampling consumes exactly one uniform per normal (inverse CDF),
which makes the counter-advance law trivial: a fill of n samples advances
the counter by exactly n.  Philox supplies the per-position uint64s
(position p lives in block p // 4, lane p % 4).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from numpy.random import Philox
from scipy.special import ndtri

__all__ = [
    "ElemFormat",
    "TensorBuf",
    "RngState",
    "ConversionSummary",
    "gaussian_fill",
    "raw_uint64",
    "encode",
    "decode",
    "derive_step_seed",
    "PERTURB_STREAM",
    "BATCH_STREAM",
    "INIT_STREAM",
    "DATA_STREAM",
]

_MASK64 = (1 << 64) - 1

# Stream ids.  Perturbation/update draws and batch sampling never share a
# stream, and the convention is identical in both engines.
PERTURB_STREAM = 0
BATCH_STREAM = 1
INIT_STREAM = 2
DATA_STREAM = 3


class ElemFormat(Enum):
    """Element storage formats.  F16/BF16/F8E4M3 are transfer/storage only;
    arithmetic always happens in F64 or F32 after decode."""

    F64 = ("f64", 8)
    F32 = ("f32", 4)
    F16 = ("f16", 2)
    BF16 = ("bf16", 2)
    F8E4M3 = ("f8e4m3", 1)

    def __init__(self, tag: str, nbytes: int):
        self.tag = tag
        self.bytes_per_elem = nbytes

    @property
    def storage_dtype(self) -> np.dtype:
        return _STORAGE_DTYPE[self]

    @property
    def is_arithmetic(self) -> bool:
        return self in (ElemFormat.F64, ElemFormat.F32)

    @classmethod
    def from_tag(cls, tag: str) -> "ElemFormat":
        for fmt in cls:
            if fmt.tag == tag:
                return fmt
        raise ValueError(f"unknown element format tag: {tag!r}")


_STORAGE_DTYPE = {
    ElemFormat.F64: np.dtype(np.float64),
    ElemFormat.F32: np.dtype(np.float32),
    ElemFormat.F16: np.dtype(np.float16),
    ElemFormat.BF16: np.dtype(np.uint16),      # raw bf16 bit patterns
    ElemFormat.F8E4M3: np.dtype(np.uint8),     # raw e4m3 bit patterns
}


@dataclass
class TensorBuf:
    """Flat numeric buffer: 1-D storage array + logical shape + format tag.

    The storage dtype is the format's wire representation (uint16/uint8 for
    the low-bit formats).  Shape is fixed at creation; reinterpretation
    requires building a new TensorBuf explicitly.
    """

    data: np.ndarray
    shape: tuple[int, ...]
    fmt: ElemFormat

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        if any(s <= 0 for s in self.shape):
            raise ValueError(f"shape entries must be positive, got {self.shape}")
        if self.data.ndim != 1:
            raise ValueError("TensorBuf storage must be 1-D")
        if self.data.dtype != self.fmt.storage_dtype:
            raise ValueError(
                f"storage dtype {self.data.dtype} does not match format {self.fmt.tag}"
            )
        if self.data.size != math.prod(self.shape):
            raise ValueError(
                f"storage has {self.data.size} elements, shape {self.shape} "
                f"needs {math.prod(self.shape)}"
            )

    @property
    def nbytes(self) -> int:
        return self.data.size * self.fmt.bytes_per_elem

    @property
    def a(self) -> np.ndarray:
        """Shaped view of the storage (arithmetic formats only)."""
        if not self.fmt.is_arithmetic:
            raise ValueError(f"{self.fmt.tag} buffers must be decoded before use")
        return self.data.reshape(self.shape)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "TensorBuf":
        fmt = {np.dtype(np.float64): ElemFormat.F64, np.dtype(np.float32): ElemFormat.F32}
        if arr.dtype not in fmt:
            raise ValueError(f"from_array expects f32/f64, got {arr.dtype}")
        return cls(np.ascontiguousarray(arr).reshape(-1), arr.shape, fmt[arr.dtype])

    @classmethod
    def zeros(cls, shape, fmt: ElemFormat) -> "TensorBuf":
        n = math.prod(int(s) for s in shape)
        return cls(np.zeros(n, dtype=fmt.storage_dtype), tuple(shape), fmt)


@dataclass(frozen=True)
class RngState:
    """Capturable generator state: 24 bytes, trivially serializable.

    Equal states produce bit-identical sequences; capture/restore is the
    identity because the state IS the full generator configuration.
    """

    seed: int
    stream: int = 0
    counter: int = 0

    def __post_init__(self):
        object.__setattr__(self, "seed", int(self.seed) & _MASK64)
        object.__setattr__(self, "stream", int(self.stream) & _MASK64)
        object.__setattr__(self, "counter", int(self.counter) & _MASK64)

    def advanced(self, n: int) -> "RngState":
        return RngState(self.seed, self.stream, self.counter + int(n))


def raw_uint64(state: RngState, n: int) -> tuple[np.ndarray, RngState]:
    """n uint64 draws at absolute positions counter..counter+n-1."""
    if n < 1:
        raise ValueError(f"draw count must be >= 1, got {n}")
    key = (state.stream << 64) | state.seed
    block, lane = divmod(state.counter, 4)
    raw = Philox(key=key, counter=block).random_raw(lane + n)
    return np.asarray(raw[lane:], dtype=np.uint64), state.advanced(n)


def gaussian_fill(state: RngState, n: int) -> tuple[np.ndarray, RngState]:
    """n standard-normal F64 samples plus the advanced state.

    Pure function of (state, n): one uniform per normal via the inverse CDF,
    so the counter advances by exactly n and a fill of n followed by m equals
    a fill of n+m split at index n.
    """
    raw, new_state = raw_uint64(state, n)
    # (x + 0.5) * 2^-53 maps the top 53 bits into the open interval (0, 1),
    # keeping ndtri finite at both ends.
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(u), new_state


def derive_step_seed(base_seed: int, step_index: int) -> int:
    """Per-iteration seed schedule shared by both engines (splitmix64 mix)."""
    x = (int(base_seed) ^ (int(step_index) * 0x9E3779B97F4A7C15)) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


# ---------------------------------------------------------------------------
# Low-bit storage codecs.
#
# Encoding is round-to-nearest-even with saturation to the target's largest
# finite magnitude; NaN inputs propagate as the target's NaN encoding and are
# tallied in the optional ConversionSummary instead of raising.  F64 sources
# narrow through F32 on the BF16/F16 paths (documented pipeline; transfers in
# this codebase are F32 or F64-from-F32, where the paths coincide).
# Decoding is exact widening for every format.
# ---------------------------------------------------------------------------

_F16_MAX = 65504.0
_BF16_MAX_BITS = np.uint16(0x7F7F)
_BF16_QNAN = np.uint16(0x7FC0)
E4M3_MAX = 448.0


@dataclass
class ConversionSummary:
    nan_count: int = 0
    saturated_count: int = 0

    def add(self, nans: int, saturated: int) -> None:
        self.nan_count += int(nans)
        self.saturated_count += int(saturated)


def _encode_f16(x: np.ndarray, summary: ConversionSummary | None) -> np.ndarray:
    with np.errstate(over="ignore"):  # overflow becomes saturation below
        out = x.astype(np.float16)
    finite_src = np.isfinite(x)
    sat = np.isinf(out) & finite_src
    if sat.any():
        out = np.where(sat, np.copysign(np.float16(_F16_MAX), out), out)
    if summary is not None:
        summary.add(np.isnan(x).sum(), sat.sum())
    return out


def _encode_bf16(x: np.ndarray, summary: ConversionSummary | None) -> np.ndarray:
    x32 = x.astype(np.float32)
    u = x32.view(np.uint32)
    nan = np.isnan(x32)
    rounded = ((u + np.uint32(0x7FFF) + ((u >> np.uint32(16)) & np.uint32(1)))
               >> np.uint32(16)).astype(np.uint16)
    sign = (rounded & np.uint16(0x8000)).astype(np.uint16)
    # rounding can push large finite values into the exp=0xFF range
    sat = ~nan & ((rounded & np.uint16(0x7FFF)) >= np.uint16(0x7F80))
    out = np.where(sat, sign | _BF16_MAX_BITS, rounded)
    out = np.where(nan, sign | _BF16_QNAN, out)
    if summary is not None:
        summary.add(nan.sum(), sat.sum())
    return out.astype(np.uint16)


def _encode_e4m3(x: np.ndarray, summary: ConversionSummary | None) -> np.ndarray:
    x64 = x.astype(np.float64)
    nan = np.isnan(x64)
    sign = np.signbit(x64)
    mag = np.abs(np.where(nan, 0.0, x64))
    sat = mag > E4M3_MAX
    mag = np.minimum(mag, E4M3_MAX)

    m, ex = np.frexp(mag)              # mag = m * 2^ex, m in [0.5, 1)
    e = np.maximum(ex - 1, -6)         # binade exponent, clamped to subnormals
    step = np.ldexp(1.0, e - 3)        # one mantissa ulp
    q = np.rint(mag / step)            # exact division; ties to even
    roll = q >= 16                     # mantissa overflow bumps the binade
    e = np.where(roll, e + 1, e)
    q = np.where(roll, 8.0, q)

    qi = q.astype(np.int64)
    code = np.where(qi >= 8, ((e + 7) << 3) + (qi - 8), qi).astype(np.uint8)
    code = np.where(nan, np.uint8(0x7F), code)
    code |= np.where(sign, np.uint8(0x80), np.uint8(0))
    if summary is not None:
        summary.add(nan.sum(), sat.sum())
    return code


def _decode_e4m3(codes: np.ndarray) -> np.ndarray:
    expf = ((codes >> np.uint8(3)) & np.uint8(0xF)).astype(np.int64)
    mant = (codes & np.uint8(7)).astype(np.float64)
    val = np.where(expf == 0, np.ldexp(mant, -9), np.ldexp(8.0 + mant, expf - 10))
    val = np.where((expf == 15) & (mant == 7), np.nan, val)
    return np.where(codes >= 0x80, -val, val)


def encode(src: TensorBuf, target: ElemFormat,
           summary: ConversionSummary | None = None) -> TensorBuf:
    """Narrow an F32/F64 buffer to a low-bit storage format."""
    if not src.fmt.is_arithmetic:
        raise ValueError(f"encode source must be f32/f64, got {src.fmt.tag}")
    if target.is_arithmetic:
        raise ValueError(f"encode target must be a low-bit format, got {target.tag}")
    x = src.data
    if target is ElemFormat.F16:
        out = _encode_f16(x, summary)
    elif target is ElemFormat.BF16:
        out = _encode_bf16(x, summary)
    else:
        out = _encode_e4m3(x, summary)
    return TensorBuf(out.reshape(-1), src.shape, target)


def decode(src: TensorBuf, target: ElemFormat) -> TensorBuf:
    """Widen a low-bit buffer back to F32/F64 (exact for every input)."""
    if src.fmt.is_arithmetic:
        raise ValueError(f"decode source must be a low-bit format, got {src.fmt.tag}")
    if not target.is_arithmetic:
        raise ValueError(f"decode target must be f32/f64, got {target.tag}")
    if src.fmt is ElemFormat.F16:
        wide = src.data.astype(target.storage_dtype)
    elif src.fmt is ElemFormat.BF16:
        wide = (src.data.astype(np.uint32) << np.uint32(16)).view(np.float32)
        wide = wide.astype(target.storage_dtype)
    else:
        wide = _decode_e4m3(src.data).astype(target.storage_dtype)
    return TensorBuf(wide.reshape(-1), src.shape, target)
