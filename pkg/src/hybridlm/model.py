"""Hybrid Mamba / sliding-window-attention language model.

Each layer is a pre-norm residual mixer (Mamba or attention, per
``cfg.layer_pattern``) followed by a pre-norm residual gated MLP. The Mamba
mixer projects the post-conv activations to (dt, B, C) with a linear layer and
has no normalization after the selective scan.

Mamba has two code paths: ``mode="scan"`` evaluates whole spans in blocks with
a closed-form decay matrix, ``mode="step"`` runs the recurrence token by token.
They compute the same function and are checked against each other.

States and caches passed in are updated in place and also returned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint
from .config import ModelConfig
from .errors import ConfigError, InputError, StateError
from .numkit import RopeParams, linear, rmsnorm, rope_apply, silu, softmax_lastdim, softplus
from .state import AttnCache, MambaState

SCAN_BLOCK = 16


def _record(trace: dict | None, key: str, value: np.ndarray) -> None:
    if trace is not None:
        trace.setdefault(key, []).append(np.array(value, copy=True))


@dataclass
class MambaParams:
    in_proj: np.ndarray
    conv_weight: np.ndarray
    conv_bias: np.ndarray
    state_proj: np.ndarray
    dt_proj: np.ndarray
    dt_bias: np.ndarray
    A_log: np.ndarray
    D: np.ndarray
    out_proj: np.ndarray

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, layer: int) -> "MambaParams":
        p = f"layers.{layer}.mamba."
        return cls(**{f: ckpt.dense(p + f) for f in cls.__dataclass_fields__})

    @property
    def d_inner(self) -> int:
        return self.conv_weight.shape[0]

    @property
    def d_conv(self) -> int:
        return self.conv_weight.shape[1]

    @property
    def d_state(self) -> int:
        return self.A_log.shape[1]

    @property
    def rank(self) -> int:
        return self.dt_proj.shape[1]

    @property
    def A(self) -> np.ndarray:
        return -np.exp(self.A_log)


@dataclass
class AttnParams:
    q_proj: np.ndarray
    k_proj: np.ndarray
    v_proj: np.ndarray
    o_proj: np.ndarray
    n_heads: int
    n_kv_heads: int
    head_dim: int
    q_norm: np.ndarray | None = None
    k_norm: np.ndarray | None = None
    eps: float = 1e-6

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, layer: int) -> "AttnParams":
        cfg = ckpt.config
        p = f"layers.{layer}.attn."
        norms = {}
        if cfg.qk_norm:
            norms = {"q_norm": ckpt.dense(p + "q_norm"), "k_norm": ckpt.dense(p + "k_norm")}
        return cls(ckpt.dense(p + "q_proj"), ckpt.dense(p + "k_proj"), ckpt.dense(p + "v_proj"),
                   ckpt.dense(p + "o_proj"), cfg.n_heads, cfg.n_kv_heads, cfg.head_dim,
                   eps=cfg.norm_eps, **norms)


# --------------------------------------------------------------------------- mamba


def _mamba_inputs(x, p: MambaParams, state: MambaState, trace, prefix):
    """Everything up to the selective scan: gate, conv, (dt, B, C)."""
    dt_ = x.dtype
    di = p.d_inner
    _record(trace, prefix + "in_proj.in", x)
    xz = linear(x, p.in_proj)
    xb, z = xz[:, :di], xz[:, di:]
    k = p.d_conv
    xpad = np.concatenate([state.conv_tail.T.astype(dt_), xb], axis=0)
    seq = x.shape[0]
    conv = np.zeros((seq, di), dtype=dt_)
    w = p.conv_weight.astype(dt_)
    for j in range(k):
        conv += w[:, j] * xpad[j:j + seq]
    conv += p.conv_bias.astype(dt_)
    u = silu(conv)
    if k > 1:
        state.conv_tail = np.ascontiguousarray(xpad[-(k - 1):].T)
    _record(trace, prefix + "state_proj.in", u)
    proj = linear(u, p.state_proj)
    r, ds = p.rank, p.d_state
    dt_pre, B, C = proj[:, :r], proj[:, r:r + ds], proj[:, r + ds:]
    _record(trace, prefix + "dt_proj.in", dt_pre)
    delta = softplus(linear(dt_pre, p.dt_proj, p.dt_bias))
    return z, u, delta, B, C


def _finish(y, z, p: MambaParams, trace, prefix):
    y = y * silu(z)
    _record(trace, prefix + "out_proj.in", y)
    return linear(y, p.out_proj)


def _scan_block(h0, u, delta, B, C, A):
    """Closed-form evaluation of one block of the recurrence.

    ``S_t = sum_{r<=t} delta_r A``; ``h_t = exp(S_t) h0 + sum_{s<=t} exp(S_t - S_s) delta_s u_s B_s``.
    """
    L = u.shape[0]
    S = np.cumsum(delta[:, :, None] * A[None], axis=0)  # [L, di, ds]
    diff = S[:, None] - S[None, :]  # [t, s, di, ds]
    causal = np.tril(np.ones((L, L), dtype=bool))[:, :, None, None]
    decay = np.exp(np.where(causal, diff, -np.inf))
    X = delta * u  # [L, di]
    y = np.einsum("tscn,sn,tn,sc->tc", decay, B, C, X, optimize=True)
    y += np.einsum("tcn,cn,tn->tc", np.exp(S), h0, C, optimize=True)
    h_last = np.exp(S[-1]) * h0 + np.einsum("scn,sn,sc->cn", decay[-1], B, X, optimize=True)
    return y, h_last


def mamba_forward(x: np.ndarray, p: MambaParams, state: MambaState, mode: str = "scan",
                  trace: dict | None = None, prefix: str = "") -> tuple[np.ndarray, MambaState]:
    """Mamba mixer over ``x[seq, d_model]`` carrying ``state``.

    Processing ``[a; b]`` in one call equals processing ``a`` then ``b``.
    """
    if x.ndim != 2 or x.shape[1] != p.in_proj.shape[1]:
        raise StateError(f"mamba input {x.shape} does not match d_model={p.in_proj.shape[1]}")
    state.check(p.d_inner, p.d_conv, p.d_state)
    if x.shape[0] == 0:
        return np.zeros((0, p.out_proj.shape[0]), dtype=x.dtype), state
    if mode not in ("scan", "step"):
        raise ConfigError(f"unknown mamba mode {mode!r}")
    z, u, delta, B, C = _mamba_inputs(x, p, state, trace, prefix)
    A = p.A.astype(x.dtype)
    D = p.D.astype(x.dtype)
    h = state.h.astype(x.dtype)
    seq = x.shape[0]
    y = np.empty((seq, p.d_inner), dtype=x.dtype)
    if mode == "step":
        for t in range(seq):
            h = np.exp(delta[t][:, None] * A) * h + (delta[t] * u[t])[:, None] * B[t][None, :]
            y[t] = h @ C[t]
    else:
        for s in range(0, seq, SCAN_BLOCK):
            e = min(seq, s + SCAN_BLOCK)
            y[s:e], h = _scan_block(h, u[s:e], delta[s:e], B[s:e], C[s:e], A)
    y += D * u
    state.h = h.astype(x.dtype)
    return _finish(y, z, p, trace, prefix), state


# --------------------------------------------------------------------------- attention


def attention_mask(q_pos: np.ndarray, k_pos: np.ndarray, window: int | None) -> np.ndarray:
    """True where query ``t`` may attend key ``s``: ``t - window < s <= t``."""
    m = k_pos[None, :] <= q_pos[:, None]
    if window is not None:
        m &= k_pos[None, :] > q_pos[:, None] - window
    return m


def attn_forward(x: np.ndarray, p: AttnParams, cache: AttnCache, window: int | None,
                 rope: RopeParams, trace: dict | None = None,
                 prefix: str = "") -> tuple[np.ndarray, AttnCache]:
    """Causal grouped-query attention, windowed unless ``window`` is ``None``.

    Masking happens before the softmax, so out-of-window probability is exactly 0.
    """
    if window is not None and window < 1:
        raise ConfigError("window must be >= 1 or FULL")
    seq = x.shape[0]
    H, Hkv, hd = p.n_heads, p.n_kv_heads, p.head_dim
    if cache.n_kv_heads != Hkv or cache.head_dim != hd:
        raise StateError("attention cache does not match head configuration")
    start = cache.count
    if seq == 0:
        return np.zeros((0, p.o_proj.shape[0]), dtype=x.dtype), cache
    _record(trace, prefix + "q_proj.in", x)
    q = linear(x, p.q_proj).reshape(seq, H, hd)
    k = linear(x, p.k_proj).reshape(seq, Hkv, hd)
    v = linear(x, p.v_proj).reshape(seq, Hkv, hd)
    if p.q_norm is not None:
        q = rmsnorm(q, p.q_norm, p.eps)
        k = rmsnorm(k, p.k_norm, p.eps)
    q = rope_apply(q, start, rope)
    k = rope_apply(k, start, rope)
    _record(trace, prefix + "k", k)
    _record(trace, prefix + "v", v)

    k_old, v_old, pos_old = cache.read()
    k_new, v_new = k, v
    if cache.quantized:
        from .quant.fp8 import fp8_decode, fp8_encode

        k_new = fp8_decode(fp8_encode(k, cache.k_spec), cache.k_spec, x.dtype)
        v_new = fp8_decode(fp8_encode(v, cache.v_spec), cache.v_spec, x.dtype)
    keys = np.concatenate([k_old.astype(x.dtype), k_new], axis=0)
    vals = np.concatenate([v_old.astype(x.dtype), v_new], axis=0)
    k_pos = np.concatenate([pos_old, start + np.arange(seq)])
    q_pos = start + np.arange(seq)
    mask = attention_mask(q_pos, k_pos, window)

    g = H // Hkv
    kh = np.repeat(keys.transpose(1, 0, 2), g, axis=0)  # [H, nk, hd]
    vh = np.repeat(vals.transpose(1, 0, 2), g, axis=0)
    scores = np.einsum("thd,hkd->htk", q, kh) / np.sqrt(hd).astype(x.dtype)
    scores = np.where(mask[None], scores, -np.inf).astype(x.dtype)
    probs = softmax_lastdim(scores)
    _record(trace, prefix + "probs", probs)
    _record(trace, prefix + "key_pos", k_pos)
    out = np.einsum("htk,hkd->thd", probs, vh).reshape(seq, H * hd)
    _record(trace, prefix + "o_proj.in", out)
    cache.append(k, v)
    return linear(out, p.o_proj), cache


# --------------------------------------------------------------------------- model


def mlp_forward(x: np.ndarray, ckpt: Checkpoint, layer: int, trace=None) -> np.ndarray:
    p = f"layers.{layer}.mlp."
    _record(trace, p + "gate.in", x)
    hidden = silu(linear(x, ckpt.dense(p + "gate"))) * linear(x, ckpt.dense(p + "up"))
    _record(trace, p + "down.in", hidden)
    return linear(hidden, ckpt.dense(p + "down"))


def new_states(cfg: ModelConfig, dtype=np.float32, kv_dtype: str = "bf16",
               kv_specs: dict | None = None, cache_window="config") -> list:
    """Fresh per-layer states. ``cache_window="config"`` sizes caches by ``cfg.window``."""
    win = cfg.window if cache_window == "config" else cache_window
    states = []
    for i, kind in enumerate(cfg.layer_pattern):
        if kind == "M":
            states.append(MambaState.for_config(cfg, dtype))
        else:
            ks, vs = (kv_specs or {}).get(i, (None, None))
            states.append(AttnCache(cfg.n_kv_heads, cfg.head_dim, win, dtype, kv_dtype, ks, vs))
    return states


class _Scratch:
    def __init__(self, cfg, dtype):
        self.states = new_states(cfg, dtype)
        self.pos = 0


def forward_embeddings(h: np.ndarray, ckpt: Checkpoint, session=None, mode: str = "scan",
                       trace: dict | None = None) -> np.ndarray:
    """Run all blocks on input embeddings ``h[seq, d_model]`` and return logits."""
    cfg = ckpt.config
    dtype = ckpt.dtype
    if session is None:
        session = _Scratch(cfg, dtype)
    if len(session.states) != cfg.n_layers:
        raise StateError("session does not match the model's layer count")
    h = np.asarray(h, dtype=dtype)
    rope = RopeParams(cfg.head_dim, cfg.rope_theta)
    eps = cfg.norm_eps
    for i, kind in enumerate(cfg.layer_pattern):
        pre = f"layers.{i}."
        r = rmsnorm(h, ckpt.dense(pre + "mixer_norm"), eps)
        st = session.states[i]
        if kind == "M":
            if not isinstance(st, MambaState):
                raise StateError(f"layer {i} expects a MambaState")
            y, _ = mamba_forward(r, MambaParams.from_checkpoint(ckpt, i), st, mode, trace,
                                 pre + "mamba.")
        else:
            if not isinstance(st, AttnCache):
                raise StateError(f"layer {i} expects an AttnCache")
            y, _ = attn_forward(r, AttnParams.from_checkpoint(ckpt, i), st, cfg.window, rope,
                                trace, pre + "attn.")
        h = h + y
        _record(trace, pre + "resid_mid", h)
        r = rmsnorm(h, ckpt.dense(pre + "mlp_norm"), eps)
        h = h + mlp_forward(r, ckpt, i, trace)
    r = rmsnorm(h, ckpt.dense("final_norm"), eps)
    _record(trace, "lm_head.in", r)
    session.pos += h.shape[0]
    return linear(r, ckpt.dense("lm_head"))


def embed(tokens, ckpt: Checkpoint) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    V = ckpt.config.vocab_size
    if tokens.size and (tokens.min() < 0 or tokens.max() >= V):
        raise InputError(f"token ids must lie in [0, {V})")
    return ckpt.dense("embed")[tokens]


def model_forward(tokens, ckpt: Checkpoint, session=None, mode: str = "scan",
                  trace: dict | None = None) -> np.ndarray:
    """Logits ``[seq, vocab]`` for ``tokens``, advancing ``session`` by ``len(tokens)``."""
    return forward_embeddings(embed(tokens, ckpt), ckpt, session, mode, trace)


def extend_context(cfg: ModelConfig, new_window: int | None, new_theta: float,
                   new_max_len: int | None = None) -> ModelConfig:
    """Widen the attention window and raise the RoPE base; parameters are untouched.

    Both quantities may only grow. The declared context grows to cover the new
    window unless ``new_max_len`` is given.
    """
    if cfg.window is None and new_window is not None:
        raise ConfigError("cannot shrink a FULL-attention window to a finite one")
    if cfg.window is not None and new_window is not None and new_window < cfg.window:
        raise ConfigError(f"refusing to shrink window {cfg.window} -> {new_window}; "
                          "context extension only widens it")
    if new_theta < cfg.rope_theta:
        raise ConfigError(f"refusing to lower rope_theta {cfg.rope_theta} -> {new_theta}")
    max_len = new_max_len or max(cfg.max_train_len, new_window or 0)
    if new_window == cfg.window and new_theta == cfg.rope_theta and max_len == cfg.max_train_len:
        return cfg
    return cfg.replace(window=new_window, rope_theta=float(new_theta), max_train_len=max_len)
