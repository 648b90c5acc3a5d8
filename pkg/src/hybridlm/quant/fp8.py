"""Static-scale FP8 codecs (E4M3 and E5M2) for the KV cache.

E4M3 is the "fn" variant: bias 7, no infinities, a single NaN mantissa pattern
(S.1111.111), max finite 448. E5M2 follows IEEE conventions: bias 15, exponent
31 encodes inf (mantissa 0) or NaN, max finite 57,344. Encoding divides by the
scale, saturates to the finite range and rounds to nearest, ties to even.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..errors import ConfigError

FORMATS = ("E4M3", "E5M2")
_LAYOUT = {"E4M3": (4, 3, 7), "E5M2": (5, 2, 15)}
NAN_CODE = 0x7F


@lru_cache(maxsize=None)
def code_table(fmt: str) -> np.ndarray:
    """float64 value of each of the 256 codes (NaN / +-inf where the format says so)."""
    if fmt not in _LAYOUT:
        raise ConfigError(f"unknown fp8 format {fmt!r}")
    ebits, mbits, bias = _LAYOUT[fmt]
    emax = (1 << ebits) - 1
    out = np.empty(256, dtype=np.float64)
    for code in range(256):
        sign = -1.0 if code & 0x80 else 1.0
        e = (code >> mbits) & emax
        m = code & ((1 << mbits) - 1)
        if fmt == "E4M3" and e == emax and m == (1 << mbits) - 1:
            out[code] = np.nan
        elif fmt == "E5M2" and e == emax:
            out[code] = sign * np.inf if m == 0 else np.nan
        elif e == 0:
            out[code] = sign * m * 2.0 ** (1 - bias - mbits)
        else:
            out[code] = sign * (1.0 + m / (1 << mbits)) * 2.0 ** (e - bias)
    out.flags.writeable = False
    return out


@lru_cache(maxsize=None)
def _positive_finite(fmt: str) -> np.ndarray:
    table = code_table(fmt)[:128]
    n = int(np.argmax(~np.isfinite(table))) if not np.all(np.isfinite(table)) else 128
    return table[:n]


def max_finite(fmt: str) -> float:
    return float(_positive_finite(fmt)[-1])


@dataclass(frozen=True)
class Fp8Spec:
    format: str = "E4M3"
    scale: float = 1.0

    def __post_init__(self):
        if self.format not in FORMATS:
            raise ConfigError(f"unknown fp8 format {self.format!r}")
        if not self.scale > 0:
            raise ConfigError("fp8 scale must be positive")

    @property
    def dtype_tag(self) -> str:
        return "fp8" + self.format.lower()


def fp8_encode(x: np.ndarray, spec: Fp8Spec) -> np.ndarray:
    """Encode to a uint8 array of the same shape."""
    x = np.asarray(x, dtype=np.float64)
    y = x / spec.scale
    vals = _positive_finite(spec.format)
    mag = np.minimum(np.abs(y), vals[-1])
    nan = np.isnan(y)
    mag = np.where(nan, 0.0, mag)
    hi = np.clip(np.searchsorted(vals, mag, side="left"), 0, len(vals) - 1)
    lo = np.maximum(hi - 1, 0)
    d_lo = mag - vals[lo]
    d_hi = vals[hi] - mag
    pick_hi = (d_hi < d_lo) | ((d_hi == d_lo) & (hi % 2 == 0))
    code = np.where(pick_hi, hi, lo).astype(np.uint8)
    code = code | np.where(np.signbit(y), 0x80, 0).astype(np.uint8)
    return np.where(nan, np.uint8(NAN_CODE), code).astype(np.uint8)


def fp8_decode(codes: np.ndarray | bytes, spec: Fp8Spec, dtype=np.float32) -> np.ndarray:
    if isinstance(codes, (bytes, bytearray, memoryview)):
        codes = np.frombuffer(codes, dtype=np.uint8)
    return (code_table(spec.format)[np.asarray(codes, dtype=np.uint8)] * spec.scale).astype(dtype)


def calibrate_kv_scale(samples, fmt: str = "E4M3") -> Fp8Spec:
    """Absmax calibration: ``scale = max|x| / max_finite``; all-zero samples give 1."""
    if isinstance(samples, np.ndarray):
        samples = [samples]
    amax = 0.0
    seen = False
    for s in samples:
        s = np.asarray(s)
        seen = True
        if s.size:
            amax = max(amax, float(np.max(np.abs(s))))
    if not seen:
        raise ConfigError("calibrate_kv_scale needs at least one sample")
    if amax == 0.0 or not np.isfinite(amax):
        return Fp8Spec(fmt, 1.0)
    return Fp8Spec(fmt, amax / max_finite(fmt))


@dataclass
class Fp8Tensor:
    """FP8-coded tensor with one static scale."""

    data: bytes
    shape: tuple[int, ...]
    spec: Fp8Spec

    @classmethod
    def from_array(cls, x: np.ndarray, spec: Fp8Spec | None = None, fmt: str = "E4M3"):
        spec = spec or calibrate_kv_scale([x], fmt)
        return cls(fp8_encode(x, spec).tobytes(), tuple(np.shape(x)), spec)

    def dequantize(self, dtype=np.float32) -> np.ndarray:
        return fp8_decode(self.data, self.spec, dtype).reshape(self.shape)

    @property
    def nbytes(self) -> int:
        return len(self.data)
