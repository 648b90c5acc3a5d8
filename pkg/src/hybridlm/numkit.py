"""Small deterministic numeric kernels.

Every function accepts ``float32`` (fast path) or ``float64`` (reference path)
arrays and returns arrays of the same dtype. Shapes are checked explicitly;
the only broadcasting allowed is a trailing-dimension weight vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError

FLOAT_DTYPES = (np.float32, np.float64)


def as_tensor(x, dtype=np.float32) -> np.ndarray:
    arr = np.asarray(x, dtype=dtype)
    return arr


def check_float(x: np.ndarray, name: str = "x") -> None:
    if x.dtype.type not in FLOAT_DTYPES:
        raise ShapeError(f"{name}: expected float32 or float64, got {x.dtype}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """``x @ weight.T (+ bias)`` with ``weight`` stored as (out_features, in_features)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    y = x @ weight.T.astype(x.dtype, copy=False)
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} vs weight {weight.shape}")
        y = y + bias.astype(x.dtype, copy=False)
    return y


def rmsnorm(x: np.ndarray, weight: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    if x.shape[-1] != weight.shape[-1] or weight.ndim != 1:
        raise ShapeError(f"rmsnorm: last dim {x.shape[-1]} vs weight {weight.shape}")
    if eps <= 0:
        raise ConfigError("rmsnorm: eps must be positive")
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return x / np.sqrt(ms + eps) * weight.astype(x.dtype, copy=False)


def silu(x: np.ndarray) -> np.ndarray:
    # x * sigmoid(x), written to avoid exp overflow for large |x|
    return x * sigmoid(x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    big = x > 30.0
    safe = np.where(big, 0.0, x).astype(x.dtype, copy=False)
    return np.where(big, x, np.log1p(np.exp(safe))).astype(x.dtype, copy=False)


def softmax_lastdim(x: np.ndarray) -> np.ndarray:
    """Row softmax with max subtraction. Rows that are entirely ``-inf`` map to zeros."""
    m = np.max(x, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0).astype(x.dtype, copy=False)
    e = np.exp(x - m)
    s = np.sum(e, axis=-1, keepdims=True)
    return e / np.where(s > 0, s, 1.0)


def log_softmax_lastdim(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=-1, keepdims=True)
    shifted = x - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


@dataclass(frozen=True)
class RopeParams:
    head_dim: int
    theta: float = 10_000.0

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2:
            raise ConfigError(f"rope head_dim must be even and positive, got {self.head_dim}")
        if not self.theta > 0:
            raise ConfigError(f"rope theta must be positive, got {self.theta}")

    def inv_freq(self) -> np.ndarray:
        i = np.arange(self.head_dim // 2, dtype=np.float64)
        return self.theta ** (-2.0 * i / self.head_dim)


def rope_apply(x: np.ndarray, start_pos: int, rope: RopeParams) -> np.ndarray:
    """Rotate interleaved (even, odd) pairs of ``x[seq, heads, head_dim]``.

    Position ``start_pos + t`` rotates pair ``i`` by ``pos * theta**(-2i/head_dim)``.
    Angles are computed in float64 regardless of the input dtype.
    """
    if x.ndim != 3:
        raise ShapeError(f"rope_apply expects [seq, heads, head_dim], got {x.shape}")
    if x.shape[-1] != rope.head_dim:
        raise ShapeError(f"rope_apply: head_dim {x.shape[-1]} != {rope.head_dim}")
    if start_pos < 0:
        raise ConfigError("rope_apply: start_pos must be non-negative")
    pos = np.arange(start_pos, start_pos + x.shape[0], dtype=np.float64)
    ang = pos[:, None] * rope.inv_freq()[None, :]
    cos = np.cos(ang).astype(x.dtype)[:, None, :]
    sin = np.sin(ang).astype(x.dtype)[:, None, :]
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out
