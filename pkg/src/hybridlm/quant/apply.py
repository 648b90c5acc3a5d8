"""Whole-model quantization: INT4 weights and calibrated FP8 KV-cache scales."""

from __future__ import annotations

import numpy as np

from ..checkpoint import Checkpoint, payload_bytes
from ..errors import ConfigError
from .fp8 import Fp8Spec, Fp8Tensor, calibrate_kv_scale
from .int4 import gptq_quantize, quantize_rtn

MIN_ELEMENTS = 1024
LINEAR_LEAVES = {"in_proj", "state_proj", "dt_proj", "out_proj", "q_proj", "k_proj", "v_proj",
                 "o_proj", "gate", "up", "down"}


def is_eligible(name: str, shape) -> bool:
    """Linear weights (and the embedding tables) with at least 1024 elements.

    conv1d kernels are never quantized; neither are norms, biases, ``A_log`` or ``D``.
    """
    if len(shape) != 2 or int(np.prod(shape)) < MIN_ELEMENTS:
        return False
    leaf = name.rsplit(".", 1)[-1]
    return leaf in LINEAR_LEAVES or name in ("embed", "lm_head")


def eligible_names(ckpt: Checkpoint) -> list[str]:
    return [n for n, t in ckpt.tensors.items() if is_eligible(n, t.shape)]


def input_key(name: str) -> str | None:
    """Trace key holding the inputs seen by the linear ``name`` (None for lookups)."""
    if name == "embed":
        return None
    if name == "lm_head":
        return "lm_head.in"
    base, leaf = name.rsplit(".", 1)
    if leaf in ("k_proj", "v_proj"):
        leaf = "q_proj"
    if leaf == "up":
        leaf = "gate"
    return f"{base}.{leaf}.in"


def collect_inputs(ckpt: Checkpoint, calib_tokens) -> dict[str, np.ndarray]:
    from ..model import model_forward

    trace: dict = {}
    seqs = calib_tokens if _is_nested(calib_tokens) else [calib_tokens]
    for seq in seqs:
        model_forward(np.asarray(seq), ckpt, None, trace=trace)
    return {k: np.concatenate(v, axis=0) for k, v in trace.items()}


def _is_nested(x) -> bool:
    return isinstance(x, (list, tuple)) and len(x) > 0 and np.ndim(x[0]) == 1


def quantize_checkpoint(ckpt: Checkpoint, scheme: str = "gptq", calib_tokens=None,
                        group_size: int = 128, damp: float = 0.01) -> Checkpoint:
    """Replace every eligible weight by an INT4 ``QuantTensor``.

    ``scheme="gptq"`` uses activations captured from the float model on
    ``calib_tokens``; the embedding table has no input Hessian and falls back
    to round-to-nearest.
    """
    if scheme not in ("gptq", "rtn"):
        raise ConfigError(f"unknown weight quantization scheme {scheme!r}")
    if scheme == "gptq" and calib_tokens is None:
        raise ConfigError("gptq needs calibration tokens")
    inputs = collect_inputs(ckpt, calib_tokens) if scheme == "gptq" else {}
    tensors = dict(ckpt.tensors)
    for name in eligible_names(ckpt):
        w = ckpt.dense(name)
        key = input_key(name)
        if scheme == "gptq" and key is not None:
            tensors[name] = gptq_quantize(w, inputs[key], group_size, damp)
        else:
            tensors[name] = quantize_rtn(w, group_size)
    extra = dict(ckpt.extra)
    extra["weight_quant"] = {"scheme": scheme, "group_size": group_size}
    return Checkpoint(ckpt.config, tensors, extra)


def compression_ratio(original: Checkpoint, quantized: Checkpoint,
                      baseline_bytes_per_param: int = 2) -> float:
    """Serialized bytes of the eligible tensors over their ``baseline`` byte count."""
    names = eligible_names(original)
    base = sum(int(np.prod(original.tensors[n].shape)) for n in names) * baseline_bytes_per_param
    return payload_bytes(quantized, names) / base


def calibrate_kv(ckpt: Checkpoint, calib_tokens, fmt: str = "E4M3") -> dict[int, tuple[Fp8Spec, Fp8Spec]]:
    """Per-attention-layer static (K, V) scales by absmax over calibration activations."""
    inputs = collect_inputs(ckpt, calib_tokens)
    specs = {}
    for i, kind in enumerate(ckpt.config.layer_pattern):
        if kind == "A":
            specs[i] = (calibrate_kv_scale(inputs[f"layers.{i}.attn.k"], fmt),
                        calibrate_kv_scale(inputs[f"layers.{i}.attn.v"], fmt))
    return specs


def kv_specs_to_extra(specs: dict) -> dict:
    return {str(i): {"format": k.format, "k_scale": k.scale, "v_scale": v.scale}
            for i, (k, v) in specs.items()}


def kv_specs_from_extra(d: dict) -> dict:
    return {int(i): (Fp8Spec(e["format"], e["k_scale"]), Fp8Spec(e["format"], e["v_scale"]))
            for i, e in d.items()}


def fp8_weights(ckpt: Checkpoint, fmt: str = "E4M3") -> Checkpoint:
    """Store eligible weights as per-tensor absmax-scaled FP8."""
    tensors = dict(ckpt.tensors)
    for name in eligible_names(ckpt):
        tensors[name] = Fp8Tensor.from_array(ckpt.dense(name), fmt=fmt)
    return Checkpoint(ckpt.config, tensors, dict(ckpt.extra))
