"""Shrinking a model: INT4 weights, FP8 KV cache, pruning, distillation, width reuse."""

import numpy as np

from hybridlm import Session, init_params, prefill, preset
from hybridlm.compress import (PruneSpec, distill_lm_head, importance_scores, prune_structured,
                               reuse_init)
from hybridlm.model import model_forward
from hybridlm.quant.apply import calibrate_kv, compression_ratio, quantize_checkpoint

cfg = preset("tiny-mama")
ck = init_params(cfg, seed=1)
rng = np.random.default_rng(1)
# GPTQ fits each layer to its calibration activations; with fewer tokens than
# input features it overfits them and can lose to plain rounding on new text
calib = rng.integers(0, cfg.vocab_size, 2048)
test = rng.integers(0, cfg.vocab_size, 48)
ref = model_forward(test, ck)

for scheme in ("rtn", "gptq"):
    q = quantize_checkpoint(ck, scheme, calib)
    err = np.sqrt(np.mean((model_forward(test, q) - ref) ** 2))
    print(f"{scheme:>4}: size ratio vs 2-byte {compression_ratio(ck, q):.3f}, logit rmse {err:.4f}")

specs = calibrate_kv(ck, calib, "E4M3")
fp8 = prefill(Session(ck, "fp8e4m3", specs), list(test))
print(f"fp8 KV cache: max |logit diff| {np.max(np.abs(fp8 - ref[-1])):.4f}")

# prune a quarter of the MLP neurons by activation importance, then distill the head back
rep = importance_scores(ck, calib)
small = prune_structured(ck, rep, PruneSpec(keep_d_ff=cfg.d_ff * 3 // 4))
print(f"pruned: {ck.param_count():,} -> {small.param_count():,} params")
small, hist = distill_lm_head(small, ck, calib, k=64, steps=20, lr=0.5)
print(f"top-64 distillation loss {hist[0]:.4f} -> {hist[-1]:.4f}")

# width reuse: a model twice as wide that computes the same function
wide = reuse_init(ck, cfg.replace(d_model=2 * cfg.d_model, d_ff=2 * cfg.d_ff))
print(f"width x2 max |logit diff| {np.max(np.abs(model_forward(test, wide) - ref)):.1e}")
