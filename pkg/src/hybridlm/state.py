"""Per-sequence inference state and memory accounting.

Byte accounting is logical: a cache entry costs ``elements x element_size`` of
its declared KV dtype ("bf16" counts 2 bytes even though the engine computes in
f32 at desk scale; "fp8e4m3"/"fp8e5m2" entries really are stored as uint8).
Mamba state is counted at the itemsize of its arrays (4 bytes in f32 mode).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .errors import StateError
from .quant.fp8 import Fp8Spec, fp8_decode, fp8_encode

KV_DTYPE_BYTES = {"f32": 4, "bf16": 2, "fp8e4m3": 1, "fp8e5m2": 1}
MAMBA_STATE_BYTES = 4


class MambaState:
    """Recurrent state of one Mamba layer: conv tail and SSM hidden state."""

    def __init__(self, d_inner: int, d_conv: int, d_state: int, dtype=np.float32):
        self.conv_tail = np.zeros((d_inner, d_conv - 1), dtype=dtype)
        self.h = np.zeros((d_inner, d_state), dtype=dtype)

    @classmethod
    def for_config(cls, cfg: ModelConfig, dtype=np.float32) -> "MambaState":
        return cls(cfg.d_inner, cfg.d_conv, cfg.d_state, dtype)

    def check(self, d_inner: int, d_conv: int, d_state: int) -> None:
        if self.conv_tail.shape != (d_inner, d_conv - 1) or self.h.shape != (d_inner, d_state):
            raise StateError(
                f"mamba state shapes {self.conv_tail.shape}/{self.h.shape} do not match "
                f"d_inner={d_inner}, d_conv={d_conv}, d_state={d_state}")

    def copy(self) -> "MambaState":
        new = MambaState.__new__(MambaState)
        new.conv_tail = self.conv_tail.copy()
        new.h = self.h.copy()
        return new

    @property
    def nbytes(self) -> int:
        return self.conv_tail.nbytes + self.h.nbytes


class AttnCache:
    """KV cache for one attention layer.

    ``window=None`` gives a growable FULL cache; a finite window gives a ring
    buffer holding the most recent ``window`` entries with O(1) append.
    Stored keys are post-RoPE. With an FP8 ``kv_dtype`` entries are encoded at
    append time and decoded on read, using the static ``k_spec`` / ``v_spec``.
    """

    def __init__(self, n_kv_heads: int, head_dim: int, window: int | None = None,
                 dtype=np.float32, kv_dtype: str = "bf16",
                 k_spec: Fp8Spec | None = None, v_spec: Fp8Spec | None = None):
        if window is not None and window < 1:
            raise StateError("window must be >= 1")
        if kv_dtype not in KV_DTYPE_BYTES:
            raise StateError(f"unknown kv dtype {kv_dtype!r}")
        self.n_kv_heads = n_kv_heads
        self.head_dim = head_dim
        self.window = window
        self.dtype = dtype
        self.kv_dtype = kv_dtype
        self.quantized = kv_dtype.startswith("fp8")
        if self.quantized:
            fmt = kv_dtype[3:].upper()
            self.k_spec = k_spec or Fp8Spec(fmt, 1.0)
            self.v_spec = v_spec or Fp8Spec(fmt, 1.0)
            if self.k_spec.format != fmt or self.v_spec.format != fmt:
                raise StateError("fp8 spec format does not match kv dtype")
        store = np.uint8 if self.quantized else dtype
        cap = window if window is not None else 16
        self._k = np.zeros((cap, n_kv_heads, head_dim), dtype=store)
        self._v = np.zeros((cap, n_kv_heads, head_dim), dtype=store)
        self.count = 0

    @property
    def mode(self) -> str:
        return "FULL" if self.window is None else "SLIDING"

    @property
    def stored(self) -> int:
        return self.count if self.window is None else min(self.count, self.window)

    @property
    def base_pos(self) -> int:
        return self.count - self.stored

    @property
    def bytes_per_token(self) -> int:
        return 2 * self.n_kv_heads * self.head_dim * KV_DTYPE_BYTES[self.kv_dtype]

    @property
    def nbytes(self) -> int:
        return self.stored * self.bytes_per_token

    def _encode(self, k: np.ndarray, v: np.ndarray):
        if self.quantized:
            return fp8_encode(k, self.k_spec), fp8_encode(v, self.v_spec)
        return k.astype(self.dtype, copy=False), v.astype(self.dtype, copy=False)

    def append(self, k: np.ndarray, v: np.ndarray) -> None:
        """Append one token (``[n_kv, hd]``) or a span (``[seq, n_kv, hd]``)."""
        k = np.asarray(k)
        v = np.asarray(v)
        if k.ndim == 2:
            k, v = k[None], v[None]
        tail = (self.n_kv_heads, self.head_dim)
        if k.shape[1:] != tail or v.shape != k.shape:
            raise StateError(f"kv shapes {k.shape}/{v.shape} do not match {tail}")
        n = k.shape[0]
        if n == 0:
            return
        ke, ve = self._encode(k, v)
        if self.window is None:
            need = self.count + n
            if need > self._k.shape[0]:
                cap = max(need, 2 * self._k.shape[0])
                self._k = _grow(self._k, cap)
                self._v = _grow(self._v, cap)
            self._k[self.count:need] = ke
            self._v[self.count:need] = ve
        else:
            w = self.window
            keep = min(n, w)
            pos = (self.count + n - keep + np.arange(keep)) % w
            self._k[pos] = ke[n - keep:]
            self._v[pos] = ve[n - keep:]
        self.count += n

    def _ordered(self, buf: np.ndarray) -> np.ndarray:
        if self.window is None:
            return buf[:self.count]
        if self.count <= self.window:
            return buf[:self.count]
        start = self.count % self.window
        return np.concatenate([buf[start:], buf[:start]], axis=0)

    def read(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(keys, values, absolute positions), oldest first."""
        k = self._ordered(self._k)
        v = self._ordered(self._v)
        if self.quantized:
            k = fp8_decode(k, self.k_spec, self.dtype)
            v = fp8_decode(v, self.v_spec, self.dtype)
        else:
            k = k.copy()
            v = v.copy()
        return k, v, np.arange(self.base_pos, self.count)

    def copy(self) -> "AttnCache":
        new = AttnCache.__new__(AttnCache)
        new.__dict__.update(self.__dict__)
        new._k = self._k.copy()
        new._v = self._v.copy()
        return new


def _grow(buf: np.ndarray, cap: int) -> np.ndarray:
    out = np.zeros((cap,) + buf.shape[1:], dtype=buf.dtype)
    out[:buf.shape[0]] = buf
    return out


@dataclass(frozen=True)
class MemoryReport:
    weight_bytes: int
    kv_bytes_per_token: int
    kv_bytes_total: int
    mamba_state_bytes: int
    kv_elements_per_token: int = 0
    context_len: int = 0

    def to_table(self) -> str:
        rows = [
            ("context_len", self.context_len),
            ("weight_bytes", self.weight_bytes),
            ("kv_elements_per_token", self.kv_elements_per_token),
            ("kv_bytes_per_token", self.kv_bytes_per_token),
            ("kv_bytes_total", self.kv_bytes_total),
            ("mamba_state_bytes", self.mamba_state_bytes),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v:>16,d}" for k, v in rows)


def kv_elements_per_token(cfg: ModelConfig) -> int:
    return sum(2 * cfg.n_kv_heads * cfg.head_dim for k in cfg.layer_pattern if k == "A")


def memory_footprint(cfg: ModelConfig, context_len: int, kv_dtype: str = "bf16",
                     weight_bytes_per_param: int = 2) -> MemoryReport:
    """Exact integer memory accounting for weights, KV cache and Mamba state.

    A finite window caps the stored KV entries at ``window``; FULL stores all.
    """
    from .params import param_count

    if context_len < 0:
        raise StateError("context_len must be non-negative")
    elems = kv_elements_per_token(cfg)
    per_token = elems * KV_DTYPE_BYTES[kv_dtype]
    stored = context_len if cfg.window is None else min(context_len, cfg.window)
    mamba = sum((cfg.d_inner * (cfg.d_conv - 1) + cfg.d_inner * cfg.d_state) * MAMBA_STATE_BYTES
                for k in cfg.layer_pattern if k == "M")
    return MemoryReport(
        weight_bytes=param_count(cfg) * weight_bytes_per_param,
        kv_bytes_per_token=per_token,
        kv_bytes_total=per_token * stored,
        mamba_state_bytes=mamba,
        kv_elements_per_token=elems,
        context_len=context_len,
    )


def session_memory_bytes(session) -> int:
    """Exact bytes currently held by a session's per-layer state."""
    return sum(s.nbytes for s in session.states)
