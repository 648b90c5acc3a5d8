"""Hybrid Mamba / sliding-window inference on a tiny random model.

Walks through one-shot vs chunked prefill, greedy generation past the
training length, and the memory bill of a windowed vs full-attention cache.
"""

import numpy as np

from hybridlm import Session, chunked_prefill, generate, init_params, prefill, preset
from hybridlm.config import production_like_config
from hybridlm.state import memory_footprint, session_memory_bytes

cfg = preset("tiny-mama")
ck = init_params(cfg, seed=0)
print(f"pattern {cfg.layer_pattern}, window {cfg.window}, {ck.param_count():,} params")

# chunked prefill carries Mamba state and the KV ring across chunk boundaries
prompt = list(np.random.default_rng(0).integers(0, cfg.vocab_size, 100))
whole = prefill(Session(ck), prompt)
for chunk in (1, 7, 32):
    diff = np.max(np.abs(chunked_prefill(Session(ck), prompt, chunk) - whole))
    print(f"chunk {chunk:>2}: max |logit diff| vs one-shot = {diff:.1e}")

# generation well past max_train_len keeps a fixed-size state
s = Session(ck)
prefill(s, prompt[:cfg.window])
before = session_memory_bytes(s)
out = generate(s, prompt[cfg.window:cfg.window + 4], 3 * cfg.max_train_len)
print(f"generated {len(out)} tokens; state bytes {before} -> {session_memory_bytes(s)}")

# KV cache at 32k tokens for a production-shaped config (full attention after extension)
big = production_like_config()
for kv in ("bf16", "fp8e4m3"):
    rep = memory_footprint(big, 32_768, kv)
    print(f"{kv:>8}: {rep.kv_bytes_per_token:,} B/token, {rep.kv_bytes_total / 2**30:.2f} GiB at 32k")
