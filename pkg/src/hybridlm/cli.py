"""Command-line entry point: ``hybridlm <subcommand> ...``.

Exit codes: 0 success, 2 usage error, 1 runtime error. Every output file is
written to a temporary sibling and renamed into place.
"""

from __future__ import annotations

import argparse
import os
import re
import sys
import tempfile

import numpy as np

from . import checkpoint as ckio
from .config import FULL, PRESETS, preset
from .errors import HybridLMError, InputError

# --------------------------------------------------------------------------- helpers


def write_atomic(path: str, data: str | bytes) -> None:
    mode = "wb" if isinstance(data, bytes) else "w"
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8"})) as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def parse_tokens(text: str) -> list[int]:
    """Comma- or whitespace-separated decimal token ids."""
    parts = [p for p in re.split(r"[\s,]+", text.strip()) if p]
    try:
        return [int(p) for p in parts]
    except ValueError as exc:
        raise InputError(f"bad token id: {exc}") from exc


def read_tokens(path: str) -> list[int]:
    with open(path, encoding="utf-8") as f:
        return parse_tokens(f.read())


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _window(text: str):
    return FULL if text.lower() == "full" else int(text)


def unescape_line(line: str) -> str:
    return re.sub(r"\\(.)", lambda m: {"n": "\n", "t": "\t", "r": "\r"}.get(m.group(1), m.group(1)),
                  line)


def escape_line(text: str) -> str:
    return text.replace("\\", "\\\\").replace("\n", "\\n").replace("\t", "\\t").replace("\r", "\\r")


def _with_context(ckpt, args):
    """Apply --window / --rope-theta overrides through the context-extension rule."""
    from .model import extend_context

    w = getattr(args, "window", None)
    theta = getattr(args, "rope_theta", None)
    if w is None and theta is None:
        return ckpt
    cfg = ckpt.config
    new_cfg = extend_context(cfg, cfg.window if w is None else _window(w),
                             cfg.rope_theta if theta is None else theta)
    return ckpt.with_config(new_cfg)


# --------------------------------------------------------------------------- commands


def cmd_init(args) -> int:
    from .params import init_params, param_count

    cfg = preset(args.preset)
    if args.window is not None:
        cfg = cfg.replace(window=_window(args.window))
    if args.rope_theta is not None:
        cfg = cfg.replace(rope_theta=args.rope_theta)
    ckio.save(init_params(cfg, seed=args.seed), args.out)
    print(f"wrote {args.out}: preset={args.preset} pattern={cfg.layer_pattern} "
          f"params={param_count(cfg)}")
    return 0


def cmd_run(args) -> int:
    from .engine import SamplerParams, Session, generate
    from .quant.apply import kv_specs_from_extra

    ckpt = _with_context(ckio.load(args.model), args)
    if (args.prompt_tokens is None) == (args.prompt_file is None):
        raise InputError("give exactly one of --prompt-tokens or --prompt-file")
    prompt = (parse_tokens(args.prompt_tokens) if args.prompt_tokens is not None
              else read_tokens(args.prompt_file))
    specs = None
    if args.kv_dtype.startswith("fp8") and "kv_fp8" in ckpt.extra:
        specs = kv_specs_from_extra(ckpt.extra["kv_fp8"])
    session = Session(ckpt, args.kv_dtype, specs)
    out = generate(session, prompt, args.max_new,
                   SamplerParams(args.temperature, args.top_p, args.seed), args.chunk_size)
    print(" ".join(str(t) for t in out))
    return 0


def cmd_eval_longctx(args) -> int:
    from .longeval import (GridSpec, TaskVocab, build_copy_model, checkpoint_sweep,
                           greedy_runner, run_grid)

    vocab = TaskVocab()
    lengths, depths = _ints(args.lengths), _floats(args.depths)
    if args.heldout:
        if not args.model:
            raise InputError("a checkpoint sweep needs --model paths")
        grid = GridSpec(tuple(lengths), tuple(depths), args.trials, args.seed, args.task,
                        args.key_len)
        rep = checkpoint_sweep(args.model, grid, read_tokens(args.heldout), vocab=vocab)
        print(rep.to_table())
        print(f"selected: {rep.names[rep.selected]}")
        grids = list(zip(rep.names, rep.grids))
    else:
        if args.copy_model:
            models = [("copy-model", build_copy_model(vocab))]
        elif args.model:
            models = [(m, ckio.load(m)) for m in args.model]
        else:
            raise InputError("give --model or --copy-model")
        grids = []
        for name, ck in models:
            g = run_grid(greedy_runner(ck), lengths, depths, args.trials, args.seed, args.task,
                         vocab, args.key_len)
            grids.append((name, g))
    csv = []
    for name, g in grids:
        print(f"# {name} ({g.task}, n={g.n_trials})")
        print(g.to_table())
        csv.append(g.to_csv() if not csv else g.to_csv().split("\n", 1)[1])
    if args.csv:
        write_atomic(args.csv, "".join(csv))
    return 0


def cmd_quantize(args) -> int:
    from .quant.apply import (calibrate_kv, compression_ratio, fp8_weights, kv_specs_to_extra,
                              quantize_checkpoint)

    ckpt = ckio.load(args.model)
    calib = read_tokens(args.calib) if args.calib else None
    if args.scheme == "fp8":
        q = fp8_weights(ckpt, args.fp8_format)
    else:
        q = quantize_checkpoint(ckpt, args.scheme, calib, args.group_size, args.damp)
    if args.kv_fp8:
        if calib is None:
            raise InputError("--kv-fp8 needs --calib")
        q.extra["kv_fp8"] = kv_specs_to_extra(calibrate_kv(ckpt, calib, args.kv_fp8))
    ckio.save(q, args.out)
    print(f"wrote {args.out}: scheme={args.scheme} "
          f"ratio_vs_2byte={compression_ratio(ckpt, q):.4f}")
    return 0


def cmd_prune(args) -> int:
    from .compress import PruneSpec, importance_scores, prune_structured

    ckpt = ckio.load(args.model)
    report = importance_scores(ckpt, read_tokens(args.calib))
    print(report.to_table())
    spec = PruneSpec(args.keep_d_ff, args.keep_heads, args.keep_d_inner, args.keep_d_model)
    pruned = prune_structured(ckpt, report, spec)
    ckio.save(pruned, args.out)
    print(f"wrote {args.out}: params {ckpt.param_count()} -> {pruned.param_count()}")
    return 0


def cmd_distill(args) -> int:
    from .compress import distill_lm_head

    student, teacher = ckio.load(args.student), ckio.load(args.teacher)
    tokens = read_tokens(args.tokens)
    k = min(args.k, teacher.config.vocab_size)
    new, history = distill_lm_head(student, teacher, tokens, k, args.steps, args.lr)
    print(f"top-{k} distillation loss: {history[0]:.6f}")
    if args.steps:
        print(f"after {args.steps} head steps: {history[-1]:.6f}")
    if args.out:
        ckio.save(new, args.out)
    return 0


def cmd_dpo(args) -> int:
    from .prefkit import DpoHyper, dpo_batch_loss, dpo_loss, filter_by_reward_gap, read_pairs, write_pairs

    hp = DpoHyper(args.beta, args.alpha_len, args.gamma_sft)
    pairs = read_pairs(args.pairs)
    kept = filter_by_reward_gap(pairs, args.min_gap)
    print(f"pairs: {len(pairs)} kept: {len(kept)} (min_gap={args.min_gap:g})")
    for i, p in enumerate(kept):
        loss, g = dpo_loss(p, hp)
        print(f"{i}\tloss={loss:.9f}\tdlp_w={g.policy_logp_chosen:.9f}\t"
              f"dlp_l={g.policy_logp_rejected:.9f}")
    if kept:
        print(f"mean loss: {dpo_batch_loss(kept, hp):.9f}")
    if args.out:
        d = os.path.dirname(os.path.abspath(args.out))
        fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
        os.close(fd)
        write_pairs(kept, tmp)
        os.replace(tmp, args.out)
    return 0


def cmd_merge(args) -> int:
    from .prefkit import merge_weighted

    if len(args.model) < 2:
        raise InputError("merge needs at least two --model paths")
    merged = merge_weighted([ckio.load(m) for m in args.model], _floats(args.lambdas))
    ckio.save(merged, args.out)
    print(f"wrote {args.out}: merged {len(args.model)} checkpoints")
    return 0


def cmd_dedup(args) -> int:
    from .dedup import DedupConfig, dedup_corpus

    with open(args.input, encoding="utf-8") as f:
        docs = [unescape_line(line.rstrip("\n")) for line in f]
    cfg = DedupConfig(args.ngram, args.num_perms, args.threshold, args.seed)
    kept = dedup_corpus(docs, cfg)
    write_atomic(args.out, "".join(f"{i + 1}\t{escape_line(docs[i])}\n" for i in kept))
    print(f"documents: {len(docs)} kept: {len(kept)}")
    return 0


def cmd_inspect(args) -> int:
    from .quant.apply import eligible_names
    from .state import memory_footprint

    ckpt = ckio.load(args.path)
    cfg = ckpt.config
    print(f"config: pattern={cfg.layer_pattern} d_model={cfg.d_model} vocab={cfg.vocab_size} "
          f"window={'full' if cfg.window is None else cfg.window} rope_theta={cfg.rope_theta:g}")
    print(f"{'tensor':<32} {'dtype':<8} {'shape':<16} {'bytes':>10}")
    for name in ckpt.names():
        t = ckpt.tensors[name]
        print(f"{name:<32} {ckio._dtype_tag(t):<8} {str(tuple(t.shape)):<16} "
              f"{ckio.payload_bytes(ckpt, [name]):>10}")
    eligible = eligible_names(ckpt)
    n_elig = sum(int(np.prod(ckpt.tensors[n].shape)) for n in eligible)
    elig_bytes = ckio.payload_bytes(ckpt, eligible)
    print(f"weight_bytes_total       {ckio.payload_bytes(ckpt)}")
    print(f"eligible_weight_bytes    {elig_bytes}")
    print(f"eligible_f32_bytes       {n_elig * 4}")
    print(f"eligible_ratio_vs_f32    {elig_bytes / (n_elig * 4):.4f}" if n_elig else
          "eligible_ratio_vs_f32    n/a")
    print(f"memory at context {args.context_len} (kv {args.kv_dtype}):")
    print(memory_footprint(cfg, args.context_len, args.kv_dtype).to_table())
    return 0


# --------------------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hybridlm", description="Hybrid Mamba/attention toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--seed", type=int, default=0)
        sp.set_defaults(func=fn)
        return sp

    sp = add("init", cmd_init, "create a seeded random checkpoint from a preset")
    sp.add_argument("--preset", required=True, choices=sorted(PRESETS))
    sp.add_argument("--out", required=True)
    sp.add_argument("--window")
    sp.add_argument("--rope-theta", type=float)

    sp = add("run", cmd_run, "generate tokens from a prompt")
    sp.add_argument("--model", required=True)
    sp.add_argument("--prompt-tokens")
    sp.add_argument("--prompt-file")
    sp.add_argument("--max-new", type=int, default=16)
    sp.add_argument("--temperature", type=float, default=0.0)
    sp.add_argument("--top-p", type=float, default=1.0)
    sp.add_argument("--chunk-size", type=int)
    sp.add_argument("--kv-dtype", default="bf16", choices=["f32", "bf16", "fp8e4m3", "fp8e5m2"])
    sp.add_argument("--window", help="widen the attention window (integer or 'full')")
    sp.add_argument("--rope-theta", type=float)

    sp = add("eval-longctx", cmd_eval_longctx, "passkey/phonebook accuracy grid")
    sp.add_argument("--model", action="append")
    sp.add_argument("--copy-model", action="store_true",
                    help="evaluate the constructed sliding-window copy model")
    sp.add_argument("--task", default="passkey", choices=["passkey", "phonebook"])
    sp.add_argument("--lengths", default="16,32")
    sp.add_argument("--depths", default="0,0.5,1")
    sp.add_argument("--trials", type=int, default=4)
    sp.add_argument("--key-len", type=int, default=5)
    sp.add_argument("--heldout", help="token file; enables the checkpoint sweep")
    sp.add_argument("--csv")

    sp = add("quantize", cmd_quantize, "INT4 (gptq/rtn) or FP8 weight quantization")
    sp.add_argument("--model", required=True)
    sp.add_argument("--scheme", default="gptq", choices=["gptq", "rtn", "fp8"])
    sp.add_argument("--calib")
    sp.add_argument("--out", required=True)
    sp.add_argument("--group-size", type=int, default=128)
    sp.add_argument("--damp", type=float, default=0.01)
    sp.add_argument("--fp8-format", default="E4M3", choices=["E4M3", "E5M2"])
    sp.add_argument("--kv-fp8", choices=["E4M3", "E5M2"], help="calibrate static FP8 KV scales")

    sp = add("prune", cmd_prune, "activation-importance structured pruning")
    sp.add_argument("--model", required=True)
    sp.add_argument("--calib", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--keep-d-ff", type=int)
    sp.add_argument("--keep-heads", type=int)
    sp.add_argument("--keep-d-inner", type=int)
    sp.add_argument("--keep-d-model", type=int)

    sp = add("distill", cmd_distill, "top-k logit distillation loss (optionally fit lm_head)")
    sp.add_argument("--teacher", required=True)
    sp.add_argument("--student", required=True)
    sp.add_argument("--tokens", required=True)
    sp.add_argument("--k", type=int, default=128)
    sp.add_argument("--steps", type=int, default=0)
    sp.add_argument("--lr", type=float, default=0.1)
    sp.add_argument("--out")

    sp = add("dpo", cmd_dpo, "evaluate the length-regularized DPO loss on preference pairs")
    sp.add_argument("--pairs", required=True)
    sp.add_argument("--beta", type=float, required=True)
    sp.add_argument("--alpha-len", type=float, required=True)
    sp.add_argument("--gamma-sft", type=float, required=True)
    sp.add_argument("--min-gap", type=float, default=0.0)
    sp.add_argument("--out", help="write the reward-gap filtered pairs")

    sp = add("merge", cmd_merge, "weighted mean of checkpoints")
    sp.add_argument("--model", action="append", required=True)
    sp.add_argument("--lambdas", required=True)
    sp.add_argument("--out", required=True)

    sp = add("dedup", cmd_dedup, "MinHash near-duplicate removal, one document per line")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--ngram", type=int, default=13)
    sp.add_argument("--num-perms", type=int, default=128)
    sp.add_argument("--threshold", type=float, default=0.8)

    sp = add("inspect", cmd_inspect, "tensor table, weight bytes and memory report")
    sp.add_argument("path")
    sp.add_argument("--context-len", type=int, default=4096)
    sp.add_argument("--kv-dtype", default="bf16", choices=["f32", "bf16", "fp8e4m3", "fp8e5m2"])
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (HybridLMError, OSError, ValueError) as exc:
        print(f"hybridlm {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
