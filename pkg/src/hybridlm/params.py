"""Parameter naming, shapes and seeded initialization.

Linear weights are stored ``(out_features, in_features)``. Tensor names::

    embed                                  [vocab, d_model]
    layers.{i}.mixer_norm / mlp_norm       [d_model]
    layers.{i}.mamba.in_proj               [2*d_inner, d_model]   (x-branch rows, then gate rows)
    layers.{i}.mamba.conv_weight / bias    [d_inner, d_conv] / [d_inner]
    layers.{i}.mamba.state_proj            [rank + 2*d_state, d_inner]  (dt, B, C)
    layers.{i}.mamba.dt_proj / dt_bias     [d_inner, rank] / [d_inner]
    layers.{i}.mamba.A_log                 [d_inner, d_state]
    layers.{i}.mamba.D                     [d_inner]
    layers.{i}.mamba.out_proj              [d_model, d_inner]
    layers.{i}.attn.{q,k,v,o}_proj         q: [H*hd, d], k/v: [Hkv*hd, d], o: [d, H*hd]
    layers.{i}.attn.q_norm / k_norm        [head_dim]   (only when cfg.qk_norm)
    layers.{i}.mlp.gate / up / down        [d_ff, d] / [d_ff, d] / [d, d_ff]
    final_norm                             [d_model]
    lm_head                                [vocab, d_model]
"""

from __future__ import annotations

import numpy as np

from .checkpoint import Checkpoint
from .config import ModelConfig


def layer_shapes(cfg: ModelConfig, kind: str) -> dict[str, tuple[int, ...]]:
    d, di, ds = cfg.d_model, cfg.d_inner, cfg.d_state
    shapes: dict[str, tuple[int, ...]] = {"mixer_norm": (d,), "mlp_norm": (d,)}
    if kind == "M":
        shapes.update({
            "mamba.in_proj": (2 * di, d),
            "mamba.conv_weight": (di, cfg.d_conv),
            "mamba.conv_bias": (di,),
            "mamba.state_proj": (cfg.rank + 2 * ds, di),
            "mamba.dt_proj": (di, cfg.rank),
            "mamba.dt_bias": (di,),
            "mamba.A_log": (di, ds),
            "mamba.D": (di,),
            "mamba.out_proj": (d, di),
        })
    else:
        hd = cfg.head_dim
        shapes.update({
            "attn.q_proj": (cfg.n_heads * hd, d),
            "attn.k_proj": (cfg.n_kv_heads * hd, d),
            "attn.v_proj": (cfg.n_kv_heads * hd, d),
            "attn.o_proj": (d, cfg.n_heads * hd),
        })
        if cfg.qk_norm:
            shapes.update({"attn.q_norm": (hd,), "attn.k_norm": (hd,)})
    shapes.update({
        "mlp.gate": (cfg.d_ff, d),
        "mlp.up": (cfg.d_ff, d),
        "mlp.down": (d, cfg.d_ff),
    })
    return shapes


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = {"embed": (cfg.vocab_size, cfg.d_model)}
    for i, kind in enumerate(cfg.layer_pattern):
        for k, s in layer_shapes(cfg, kind).items():
            shapes[f"layers.{i}.{k}"] = s
    shapes["final_norm"] = (cfg.d_model,)
    shapes["lm_head"] = (cfg.vocab_size, cfg.d_model)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def _inv_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Checkpoint:
    """Seeded random initialization with standard Mamba conventions.

    ``A_log = log(1..d_state)`` per channel, step sizes log-uniform in
    [1e-3, 1e-1] through the softplus bias, ``D = 1``, norms at one, and
    linear weights ``N(0, 1/fan_in)``.
    """
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("norm"):
            w = np.ones(shape)
        elif name == "embed":
            w = rng.standard_normal(shape)
        elif leaf == "A_log":
            w = np.tile(np.log(np.arange(1, shape[1] + 1, dtype=np.float64)), (shape[0], 1))
        elif leaf == "D":
            w = np.ones(shape)
        elif leaf == "dt_bias":
            dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=shape))
            w = _inv_softplus(dt)
        elif leaf == "conv_bias":
            w = 0.1 * rng.standard_normal(shape)
        elif leaf == "conv_weight":
            w = rng.standard_normal(shape) / np.sqrt(shape[1])
        else:
            w = rng.standard_normal(shape) / np.sqrt(shape[1])
        tensors[name] = np.asarray(w, dtype=dtype)
    return Checkpoint(cfg, tensors)
