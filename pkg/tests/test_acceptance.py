"""Acceptance suite: one check per release criterion, each printing a PASS/FAIL line.

Run under pytest (``pytest tests/test_acceptance.py -s`` shows the lines inline)
or directly with ``python3 tests/test_acceptance.py`` for just the summary.
"""

import math
import os
import sys
import time

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

import oracles  # noqa: E402
from conftest import random_checkpoint, tiny_model  # noqa: E402
from hybridlm.checkpoint import HEADER, loads, serialize  # noqa: E402
from hybridlm.compress import (PruneSpec, distill_topk_loss, importance_scores,  # noqa: E402
                               prune_structured, reuse_init)
from hybridlm.config import FULL, ModelConfig, preset, production_like_config  # noqa: E402
from hybridlm.dedup import (DedupConfig, binomial_bound, dedup_corpus, minhash_signature,  # noqa: E402
                            signatures, similar_pairs, similarity)
from hybridlm.engine import Session, chunked_prefill, decode, prefill  # noqa: E402
from hybridlm.errors import IntegrityError  # noqa: E402
from hybridlm.longeval import (PASSKEY, PHONEBOOK, TaskVocab, build_copy_model,  # noqa: E402
                               echo_oracle, greedy_runner, make_case, receptive_field, run_grid,
                               score_exact)
from hybridlm.model import embed, extend_context, forward_embeddings, model_forward  # noqa: E402
from hybridlm.params import init_params  # noqa: E402
from hybridlm.prefkit import DpoHyper, PreferencePair, dpo_loss  # noqa: E402
from hybridlm.quant import (Fp8Spec, calibration_error, code_table, fp8_decode,  # noqa: E402
                            fp8_encode, gptq_quantize, max_finite, quantize_rtn)
from hybridlm.quant.apply import compression_ratio, quantize_checkpoint  # noqa: E402
from hybridlm.state import kv_elements_per_token, memory_footprint, session_memory_bytes  # noqa: E402


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


def _worst(a, b):
    return float(np.max(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64))))


# --------------------------------------------------------------------------- criteria
# each returns (ok, detail)


def crit_01_memory_arithmetic():
    with Timer() as t:
        cfg = production_like_config()
        bf16 = memory_footprint(cfg, 32_768, "bf16")
        fp8 = memory_footprint(cfg, 32_768, "fp8e4m3")
    got = (kv_elements_per_token(cfg), bf16.kv_bytes_per_token, fp8.kv_bytes_per_token, bf16.kv_bytes_total)
    ok = got == (55_296, 110_592, 55_296, 3_623_878_656) and t.elapsed < 1
    return ok, f"elements/bf16/fp8/total={got} in {t.elapsed:.3f}s"


def crit_02_compression_ratio():
    with Timer() as t:
        ck = init_params(preset("tiny-mama"), seed=0)
        calib = np.random.default_rng(0).integers(0, 256, 128)
        ratio = compression_ratio(ck, quantize_checkpoint(ck, "gptq", calib))
    return 0.25 <= ratio <= 0.35 and t.elapsed < 10, f"ratio vs 2-byte={ratio:.4f} in {t.elapsed:.2f}s"


def crit_03_gptq_vs_rtn():
    violations, gaps = 0, []
    with Timer() as t:
        for seed in range(50):
            rng = np.random.default_rng(seed)
            w = rng.standard_normal((32, 32)).astype(np.float32)
            x = rng.standard_normal((256, 8)) @ rng.standard_normal((8, 32)) + 0.1 * rng.standard_normal((256, 32))
            eg = calibration_error(w, gptq_quantize(w, x, 32).dequantize(), x)
            er = calibration_error(w, quantize_rtn(w, 32).dequantize(), x)
            violations += eg > er + 1e-6
            gaps.append(eg / er)
    ok = violations == 0 and t.elapsed < 30
    return ok, f"violations={violations}/50 mean gptq/rtn={np.mean(gaps):.3f} in {t.elapsed:.2f}s"


def crit_04_fp8_codecs():
    problems = []
    for fmt in ("E4M3", "E5M2"):
        if not np.array_equal(code_table(fmt), oracles.fp8_enumerate(fmt), equal_nan=True):
            problems.append(f"{fmt} code table")
        spec = Fp8Spec(fmt)
        if not np.isnan(fp8_decode(fp8_encode(np.array([np.nan]), spec), spec)[0]):
            problems.append(f"{fmt} nan")
        rng = np.random.default_rng(4)
        m = max_finite(fmt)
        x = np.concatenate([rng.uniform(-1.1 * m, 1.1 * m, 40_000),
                            rng.standard_normal(30_000) * rng.choice([1e-3, 1e-1, 1, 10], 30_000),
                            np.sign(rng.standard_normal(30_000)) * 2.0 ** rng.uniform(-20, np.log2(m), 30_000)])
        ours = fp8_decode(fp8_encode(x, spec), spec, np.float64)
        mism = int(np.sum(ours != oracles.fp8_nearest_many(x, fmt)))
        if mism:
            problems.append(f"{fmt} {mism} rounding mismatches")
    maxes = (max_finite("E4M3"), max_finite("E5M2"))
    if maxes != (448.0, 57344.0):
        problems.append(f"max finite {maxes}")
    return not problems, "; ".join(problems) or "256-code tables, max 448/57344, NaN, 1e5 values x2: 0 mismatches"


def _chunk_worst(ck, tokens, chunks):
    ref = prefill(Session(ck), tokens)
    return max(_worst(chunked_prefill(Session(ck), tokens, c), ref) for c in chunks)


def crit_05_chunked_prefill():
    t = list(np.random.default_rng(5).integers(0, 32, 24))
    chunks = (1, 3, 5, len(t))
    w32 = w64 = 0.0
    with Timer() as tm:
        for pattern in ("M", "A", "MA", "MAMA"):
            for window in (2, 4, FULL):
                w32 = max(w32, _chunk_worst(tiny_model(pattern, window, seed=1), t, chunks))
                w64 = max(w64, _chunk_worst(tiny_model(pattern, window, seed=1, dtype=np.float64), t, chunks))
    ok = w32 <= 1e-4 and w64 <= 1e-10 and tm.elapsed < 60
    return ok, f"max |diff| f32={w32:.2e} f64={w64:.2e} in {tm.elapsed:.2f}s"


def _sensitivity(ck, seq, target, eps=1e-3):
    h = embed(np.random.default_rng(0).integers(0, ck.config.vocab_size, seq), ck).astype(np.float64)
    base = forward_embeddings(h, ck)[target]
    out = []
    for s in range(seq):
        hp = h.copy()
        hp[s] += eps
        out.append(float(np.max(np.abs(forward_embeddings(hp, ck)[target] - base))))
    return np.array(out)


def crit_06_receptive_field():
    with Timer() as t:
        sa = _sensitivity(tiny_model("AA", 4, seed=2, dtype=np.float64), 16, 15)
        sm = _sensitivity(tiny_model("MAA", 4, seed=2, dtype=np.float64), 16, 15)
    dist = 15 - np.arange(16)
    beyond = float(np.max(sa[dist > 6]))
    ok = beyond == 0.0 and np.all(sa[dist <= 6] > 0) and sm[dist == 12][0] > 0 and t.elapsed < 30
    return ok, f"AA max beyond 6 = {beyond}; MAA at 12 = {sm[dist == 12][0]:.2e}"


def _ctx_models():
    cfg = ModelConfig(vocab_size=64, d_model=16, n_layers=4, layer_pattern="MAMA", d_state=4,
                      n_heads=4, n_kv_heads=2, head_dim=4, window=2048, rope_theta=10_000.0,
                      d_ff=24, max_train_len=2048)
    ck = init_params(cfg, seed=7)
    seqs = [np.random.default_rng(s).integers(0, 64, n) for s, n in enumerate((1, 7, 64, 300))]
    return ck, seqs


def crit_07a_context_extension_bytes():
    ck, _ = _ctx_models()
    ext = ck.with_config(extend_context(ck.config, 32_768, 1_000_000.0))
    same = ext.content_hash() == ck.content_hash()
    ok = same and ext.config.window == 32_768 and ext.config.rope_theta == 1_000_000.0
    return ok, "parameter bytes identical after 2048->32768, theta->1e6" if ok else "parameters changed"


def crit_07b_window_expansion_outputs():
    ck, seqs = _ctx_models()
    ext = ck.with_config(extend_context(ck.config, 32_768, ck.config.rope_theta))
    worst = max(_worst(model_forward(s, ext), model_forward(s, ck)) for s in seqs)
    return worst <= 1e-6, f"window 2048->32768 (theta kept), max |diff|={worst:.2e}"


def crit_07c_full_extension_outputs():
    ck, seqs = _ctx_models()
    ext = ck.with_config(extend_context(ck.config, 32_768, 1_000_000.0))
    worst = max(_worst(model_forward(s, ext), model_forward(s, ck)) for s in seqs)
    single = _worst(model_forward(seqs[0], ext), model_forward(seqs[0], ck))
    return worst <= 1e-6, (f"window 2048->32768 with theta->1e6, max |diff|={worst:.2e} "
                           f"(length-1 sequence {single:.1e}); a new RoPE base rotates every "
                           f"nonzero relative offset differently")


def crit_08_distillation():
    rng = np.random.default_rng(8)
    problems = []
    with Timer() as t:
        z = rng.standard_normal((4, 300))
        loss0, g0 = distill_topk_loss(z, z, 300)
        if abs(loss0) > 1e-7 or np.max(np.abs(g0)) > 1e-12:
            problems.append(f"identity loss {loss0:.1e}")
        l128, g128 = distill_topk_loss(rng.standard_normal((4, 300)), rng.standard_normal((4, 300)), 128)
        if not (np.isfinite(l128) and np.all(np.isfinite(g128))):
            problems.append("k=128 undefined")
        s, tt = rng.standard_normal((3, 40)), 2 * rng.standard_normal((3, 40))
        worst_rel = 0.0
        for k in (5, 20, 40):
            _, g = distill_topk_loss(s, tt, k)
            fd = np.zeros_like(s)
            for idx in np.ndindex(s.shape):
                sp, sm = s.copy(), s.copy()
                sp[idx] += 1e-6
                sm[idx] -= 1e-6
                fd[idx] = (distill_topk_loss(sp, tt, k)[0] - distill_topk_loss(sm, tt, k)[0]) / 2e-6
            worst_rel = max(worst_rel, float(np.max(np.abs(g - fd)) / np.max(np.abs(fd))))
        if worst_rel > 1e-4:
            problems.append(f"fd rel {worst_rel:.1e}")
        kl = oracles.kl_full(s, tt)
        dev = [abs(distill_topk_loss(s, tt, k)[0] - kl) for k in (2, 5, 10, 20, 30, 40)]
        if any(b > a for a, b in zip(dev, dev[1:])) or dev[-1] > 1e-7:
            problems.append(f"convergence {dev}")
    if t.elapsed > 10:
        problems.append(f"runtime {t.elapsed:.1f}s")
    return not problems, "; ".join(problems) or f"fd rel err {worst_rel:.1e}, |loss(k)-KL| monotone to {dev[-1]:.1e}"


def _calib(seed, n=48):
    return np.random.default_rng(seed).integers(0, 32, n)


def crit_09_pruning():
    ck = tiny_model("MAMA", 4, seed=8)
    dead = [1, 4, 9, 17]
    for i in range(4):
        for n in ("gate", "up"):
            ck.tensors[f"layers.{i}.mlp.{n}"][dead] = 0
    ck._dense.clear()
    out = prune_structured(ck, importance_scores(ck, _calib(0)), PruneSpec(keep_d_ff=ck.config.d_ff - 4))
    lossless = _worst(model_forward(_calib(1, 20), out), model_forward(_calib(1, 20), ck))

    ordered = 0
    for seed in range(10):
        m = tiny_model("MAMA", 4, seed=seed)
        t = _calib(seed, 64)
        rep = importance_scores(m, t)
        neg = importance_scores(m, t)
        for layer in neg.layers:
            layer.mlp_neuron_scores = -layer.mlp_neuron_scores
        keep = PruneSpec(keep_d_ff=m.config.d_ff * 3 // 4)
        base = model_forward(t, m)
        lo = np.mean((model_forward(t, prune_structured(m, rep, keep)) - base) ** 2)
        hi = np.mean((model_forward(t, prune_structured(m, neg, keep)) - base) ** 2)
        ordered += lo < hi

    t = list(_calib(5, 24))
    worst = 0.0
    for pattern in ("M", "A", "MA", "MAMA"):
        for window in (2, 4, FULL):
            m = tiny_model(pattern, window, seed=1)
            spec = PruneSpec(keep_d_ff=12, keep_heads=2 if "A" in pattern else None,
                             keep_d_inner=20 if "M" in pattern else None, keep_d_model=12)
            p = prune_structured(m, importance_scores(m, _calib(2)), spec)
            worst = max(worst, _chunk_worst(p, t, (1, 3, 5, len(t))))
    ok = lossless <= 1e-6 and ordered == 10 and worst <= 1e-4
    return ok, f"zero-importance change {lossless:.1e}; ordering {ordered}/10; pruned chunked {worst:.1e}"


def crit_10_weight_reuse():
    small_cfg = ModelConfig(vocab_size=32, d_model=8, n_layers=2, layer_pattern="MA", d_state=4,
                            n_heads=2, n_kv_heads=1, head_dim=4, window=4, d_ff=16, max_train_len=64)
    big_cfg = small_cfg.replace(d_model=16, n_heads=4, n_kv_heads=2, d_ff=32, d_state=8)
    small = init_params(small_cfg, seed=10)
    big = reuse_init(small, big_cfg)
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(20):
        t = rng.integers(0, 32, int(rng.integers(1, 24)))
        worst = max(worst, _worst(model_forward(t, big), model_forward(t, small)))
    return worst <= 1e-5, f"width 8->16 over 20 prompts, max |diff|={worst:.2e}"


def crit_11_dpo():
    loss, _ = dpo_loss(PreferencePair(4, 10, 12, -5.0, -7.0, -5.0, -7.0, 1.0, 0.0), DpoHyper(0.1, 0.0, 0.0))
    ln2_err = abs(loss - math.log(2))
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(30):
        vals = -rng.uniform(1, 40, 4)
        nw, nl = (int(v) for v in rng.integers(1, 60, 2))
        hp = DpoHyper(rng.uniform(0.01, 1), rng.uniform(0, 0.1), rng.uniform(0, 1))
        _, g = dpo_loss(PreferencePair(4, nw, nl, *vals, 1.0, 0.0), hp)
        an = (g.policy_logp_chosen, g.policy_logp_rejected, g.ref_logp_chosen, g.ref_logp_rejected)
        for i in range(4):
            vp, vm = vals.copy(), vals.copy()
            vp[i] += 1e-6
            vm[i] -= 1e-6
            fd = (dpo_loss(PreferencePair(4, nw, nl, *vp, 1.0, 0.0), hp)[0]
                  - dpo_loss(PreferencePair(4, nw, nl, *vm, 1.0, 0.0), hp)[0]) / 2e-6
            worst = max(worst, abs(an[i] - fd) / max(1.0, abs(fd)))
    hp = DpoHyper(0.5, 0.05, 0.0)
    mono = True
    for ratio in np.linspace(-2, 2, 9):
        for base in (5, 20, 80):
            seq = [dpo_loss(PreferencePair(4, base + d, base, -10 + ratio, -10.0, -10.0, -10.0, 1.0, 0.0), hp)[0]
                   for d in (0, 1, 3, 9)]
            mono &= all(a < b for a, b in zip(seq, seq[1:]))
    ok = ln2_err <= 1e-9 and worst <= 1e-6 and mono
    return ok, f"|loss-ln2|={ln2_err:.1e}; fd err {worst:.1e}; length monotone={mono}"


def crit_12_minhash():
    from test_dedup import exhaustive_pairs, lsh_corpus, min_group_jaccard, mutate, random_text

    inside = []
    for j in (0.2, 0.5, 0.8):
        inter = int(round(j * 400))
        only = (400 - inter) // 2
        common = {f"c{i}" for i in range(inter)}
        a = common | {f"a{i}" for i in range(only)}
        b = common | {f"b{i}" for i in range(400 - inter - only)}
        bound = binomial_bound(j, 128)
        inside.append(sum(abs(similarity(minhash_signature(a, DedupConfig(seed=s)),
                                         minhash_signature(b, DedupConfig(seed=s))) - j) <= bound
                          for s in range(100)))

    rng = np.random.default_rng(12)
    texts, group = [], []
    for g in range(25):
        base = random_text(rng, 200)
        for _ in range(int(rng.integers(1, 6))):
            texts.append(mutate(rng, base, int(rng.integers(0, 3))))
            group.append(g)
    kept = dedup_corpus(texts)
    one_each = sorted(group[k] for k in kept) == list(range(25)) and min_group_jaccard(texts, group) >= 0.9

    cfg = DedupConfig()
    sigs = signatures(lsh_corpus(), cfg)
    exact = exhaustive_pairs(sigs, cfg)
    lsh_ok = set(similar_pairs(sigs, cfg)) == exact
    ok = all(n >= 99 for n in inside) and one_each and lsh_ok
    return ok, (f"within 3 sigma {inside}/100; one per planted group={one_each}; "
                f"LSH == exhaustive on 2000 docs ({len(exact)} pairs)={lsh_ok}")


def crit_13_harness():
    lengths, depths = [16, 64, 256], [0.0, 0.25, 0.5, 0.75, 1.0]
    echo = all(np.all(run_grid(echo_oracle(TaskVocab(), task), lengths, depths, 3, task=task).acc == 1.0)
               for task in (PASSKEY, PHONEBOOK))
    ck = build_copy_model()
    rf = receptive_field(ck.config)
    run = greedy_runner(ck)
    inside, outside = [], []
    for length in (8, 12, 16, 24, 32, 64):
        for di, depth in enumerate(np.linspace(0, 1, 9)):
            for trial in range(2):
                c = make_case(PASSKEY, length, depth, seed=(length, di, trial), key_len=1)
                s = score_exact(run(list(c.prompt_tokens), 1), c)
                (inside if c.answer_distance <= rf else outside).append(s)
    ok = echo and np.mean(inside) == 1.0 and np.mean(outside) == 0.0
    return ok, (f"echo=1.0 everywhere: {echo}; copy model acc inside rf {rf}: {np.mean(inside):.2f} "
                f"(n={len(inside)}), outside: {np.mean(outside):.2f} (n={len(outside)})")


def crit_14_constant_memory():
    ck = init_params(preset("tiny-mama"), seed=14)
    cfg = ck.config
    s = Session(ck)
    prefill(s, list(np.random.default_rng(14).integers(0, 256, cfg.window)))
    mem0 = session_memory_bytes(s)
    mems, times = [], []
    tok = 1
    for _ in range(4 * cfg.max_train_len):
        t0 = time.perf_counter()
        logits = decode(s, tok)
        times.append(time.perf_counter() - t0)
        tok = int(np.argmax(logits))
        mems.append(session_memory_bytes(s))
    ratio = float(np.median(times[-100:]) / np.median(times[:100]))
    constant = all(m == mem0 for m in mems)
    ok = constant and ratio <= 2 and s.pos >= 4 * cfg.max_train_len
    return ok, f"{len(mems)} tokens, memory {mem0} B constant={constant}, late/early decode time={ratio:.2f}"


def crit_15_container():
    rng = np.random.default_rng(15)
    mismatches = undetected = 0
    for _ in range(1000):
        ck = random_checkpoint(rng)
        data = serialize(ck)
        back = loads(data)
        if back.content_hash() != ck.content_hash() or serialize(back) != data or back.extra != ck.extra:
            mismatches += 1
        meta_len = HEADER.unpack(data[:HEADER.size])[2]
        flipped = bytearray(data)
        i = int(rng.integers(HEADER.size + meta_len, len(data)))
        flipped[i] ^= 1 << int(rng.integers(8))
        try:
            loads(bytes(flipped))
            undetected += 1
        except IntegrityError:
            pass
    return mismatches == 0 and undetected == 0, f"1000 round trips: {mismatches} mismatches; {undetected} undetected flips"


CRITERIA = [
    ("1", "memory arithmetic", crit_01_memory_arithmetic),
    ("2", "int4 compression ratio", crit_02_compression_ratio),
    ("3", "gptq <= rtn", crit_03_gptq_vs_rtn),
    ("4", "fp8 codecs", crit_04_fp8_codecs),
    ("5", "chunked prefill equivalence", crit_05_chunked_prefill),
    ("6", "receptive-field cliff", crit_06_receptive_field),
    ("7a", "context extension: parameter bytes", crit_07a_context_extension_bytes),
    ("7b", "context extension: window-only outputs", crit_07b_window_expansion_outputs),
    ("7c", "context extension: window+theta outputs", crit_07c_full_extension_outputs),
    ("8", "top-k distillation", crit_08_distillation),
    ("9", "structured pruning", crit_09_pruning),
    ("10", "weight reuse", crit_10_weight_reuse),
    ("11", "dpo loss", crit_11_dpo),
    ("12", "minhash dedup", crit_12_minhash),
    ("13", "long-context harness", crit_13_harness),
    ("14", "constant-memory generation", crit_14_constant_memory),
    ("15", "checkpoint container", crit_15_container),
]


def evaluate(num, name, fn):
    ok, detail = fn()
    line = f"CRITERION {num:<3} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
    return bool(ok), line


@pytest.mark.parametrize("num,name,fn", CRITERIA, ids=[c[0] for c in CRITERIA])
def test_criterion(num, name, fn, capsys):
    ok, line = evaluate(num, name, fn)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


if __name__ == "__main__":
    failed = 0
    for num, name, fn in CRITERIA:
        ok, line = evaluate(num, name, fn)
        failed += not ok
        print(line, flush=True)
    sys.exit(1 if failed else 0)
