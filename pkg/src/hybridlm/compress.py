"""Model-size lifecycle: weight reuse (small -> large), structured pruning
(large -> small) and the top-k logit distillation loss used for retraining.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint
from .config import ModelConfig
from .errors import ConfigError, InputError
from .numkit import log_softmax_lastdim, softmax_lastdim
from .params import layer_shapes

# --------------------------------------------------------------------------- weight reuse


def expand_map(old: int, new: int) -> np.ndarray:
    """Source unit for each of ``new`` units: identity, then highest-index units first."""
    if new < old:
        raise ConfigError(f"cannot expand {old} units to {new}")
    extra = [old - 1 - (i % old) for i in range(new - old)]
    return np.concatenate([np.arange(old), np.asarray(extra, dtype=np.int64)]).astype(np.int64)


def _counts(mapping: np.ndarray, old: int) -> np.ndarray:
    return np.bincount(mapping, minlength=old).astype(np.float64)


@dataclass
class _Maps:
    d: np.ndarray
    d_cnt: np.ndarray


def _read_resid(w: np.ndarray, m: _Maps) -> np.ndarray:
    """Weight whose input columns read the residual stream."""
    return w[:, m.d] / m.d_cnt[m.d][None, :]


def _check_reuse(small: ModelConfig, big: ModelConfig) -> int:
    for f in ("vocab_size", "d_conv", "head_dim", "qk_norm"):
        if getattr(small, f) != getattr(big, f):
            raise ConfigError(f"weight reuse needs equal {f}: {getattr(small, f)} vs {getattr(big, f)}")
    for f in ("d_model", "d_state", "n_heads", "n_kv_heads", "d_ff", "d_inner", "rank"):
        if getattr(big, f) < getattr(small, f):
            raise ConfigError(f"weight reuse cannot shrink {f}")
    if big.d_model % small.d_model:
        raise ConfigError("d_model must grow by an integer factor (RMSNorm statistics)")
    if big.group_size != small.group_size:
        raise ConfigError("query heads per KV head must stay the same")
    if big.n_layers % small.n_layers or big.layer_pattern != small.layer_pattern * (
            big.n_layers // small.n_layers):
        raise ConfigError(f"layer pattern {big.layer_pattern!r} is not a repetition of "
                          f"{small.layer_pattern!r}")
    return big.n_layers // small.n_layers


def reuse_init(small: Checkpoint, big_cfg: ModelConfig) -> Checkpoint:
    """Initialize a larger model from a smaller one.

    Width grows by function-preserving duplication: duplicated output units are
    copied, and the weights that read them are divided by the copy count.
    Depth grows by repeating the whole block sequence.
    """
    sc = small.config
    if big_cfg == sc:
        return small.copy()
    reps = _check_reuse(sc, big_cfg)
    t = {k: np.asarray(small.dense(k), dtype=np.float64) for k in small.tensors}
    dtype = small.dtype

    md = expand_map(sc.d_model, big_cfg.d_model)
    m = _Maps(md, _counts(md, sc.d_model))
    ff = expand_map(sc.d_ff, big_cfg.d_ff)
    ff_cnt = _counts(ff, sc.d_ff)
    di = expand_map(sc.d_inner, big_cfg.d_inner)
    di_cnt = _counts(di, sc.d_inner)
    ds = expand_map(sc.d_state, big_cfg.d_state)
    ds_cnt = _counts(ds, sc.d_state)
    rk = expand_map(sc.rank, big_cfg.rank)
    rk_cnt = _counts(rk, sc.rank)
    kv = expand_map(sc.n_kv_heads, big_cfg.n_kv_heads)
    g = sc.group_size
    qh = np.array([kv[j // g] * g + j % g for j in range(big_cfg.n_heads)])
    qh_cnt = _counts(qh, sc.n_heads)
    hd = sc.head_dim

    def heads_rows(w, mapping, n_old):
        return w.reshape(n_old, hd, -1)[mapping].reshape(len(mapping) * hd, -1)

    out = {"embed": t["embed"][:, md], "final_norm": t["final_norm"][md],
           "lm_head": _read_resid(t["lm_head"], m)}
    widened = []
    for i, kind in enumerate(sc.layer_pattern):
        p = f"layers.{i}."
        L = {"mixer_norm": t[p + "mixer_norm"][md], "mlp_norm": t[p + "mlp_norm"][md]}
        if kind == "M":
            q = p + "mamba."
            n = sc.d_inner
            ip = t[q + "in_proj"]
            L["mamba.in_proj"] = _read_resid(np.concatenate([ip[:n][di], ip[n:][di]]), m)
            L["mamba.conv_weight"] = t[q + "conv_weight"][di]
            L["mamba.conv_bias"] = t[q + "conv_bias"][di]
            sp = t[q + "state_proj"]
            r, s = sc.rank, sc.d_state
            rows = np.concatenate([sp[:r][rk], sp[r:r + s][ds],
                                   sp[r + s:][ds] / ds_cnt[ds][:, None]])
            L["mamba.state_proj"] = rows[:, di] / di_cnt[di][None, :]
            L["mamba.dt_proj"] = t[q + "dt_proj"][di][:, rk] / rk_cnt[rk][None, :]
            L["mamba.dt_bias"] = t[q + "dt_bias"][di]
            L["mamba.A_log"] = t[q + "A_log"][di][:, ds]
            L["mamba.D"] = t[q + "D"][di]
            L["mamba.out_proj"] = t[q + "out_proj"][md][:, di] / di_cnt[di][None, :]
        else:
            q = p + "attn."
            L["attn.q_proj"] = _read_resid(heads_rows(t[q + "q_proj"], qh, sc.n_heads), m)
            L["attn.k_proj"] = _read_resid(heads_rows(t[q + "k_proj"], kv, sc.n_kv_heads), m)
            L["attn.v_proj"] = _read_resid(heads_rows(t[q + "v_proj"], kv, sc.n_kv_heads), m)
            o = t[q + "o_proj"][md].reshape(big_cfg.d_model, sc.n_heads, hd)
            o = o[:, qh] / qh_cnt[qh][None, :, None]
            L["attn.o_proj"] = o.reshape(big_cfg.d_model, -1)
            if sc.qk_norm:
                L["attn.q_norm"] = t[q + "q_norm"]
                L["attn.k_norm"] = t[q + "k_norm"]
        L["mlp.gate"] = _read_resid(t[p + "mlp.gate"][ff], m)
        L["mlp.up"] = _read_resid(t[p + "mlp.up"][ff], m)
        L["mlp.down"] = t[p + "mlp.down"][md][:, ff] / ff_cnt[ff][None, :]
        widened.append(L)

    n_small = sc.n_layers
    for j in range(big_cfg.n_layers):
        for k, v in widened[j % n_small].items():
            out[f"layers.{j}.{k}"] = v
    tensors = {}
    from .params import param_shapes

    for name, shape in param_shapes(big_cfg).items():
        arr = out[name]
        if arr.shape != shape:
            raise ConfigError(f"reuse produced {name} with shape {arr.shape}, expected {shape}")
        tensors[name] = arr.astype(dtype)
    return Checkpoint(big_cfg, tensors, dict(small.extra))


# --------------------------------------------------------------------------- importance


@dataclass
class LayerImportance:
    kind: str
    mlp_neuron_scores: np.ndarray
    head_scores: np.ndarray | None = None
    mamba_channel_scores: np.ndarray | None = None
    embed_channel_scores: np.ndarray | None = None


@dataclass
class ImportanceReport:
    layers: list[LayerImportance] = field(default_factory=list)

    @property
    def embed_channel_scores(self) -> np.ndarray:
        """Residual-channel importance aggregated over layers."""
        return np.sum([l.embed_channel_scores for l in self.layers], axis=0)

    def to_table(self) -> str:
        lines = ["layer kind unit          count      min        mean       max"]
        for i, l in enumerate(self.layers):
            groups = [("mlp_neuron", l.mlp_neuron_scores), ("embed_chan", l.embed_channel_scores)]
            if l.head_scores is not None:
                groups.append(("head", l.head_scores))
            if l.mamba_channel_scores is not None:
                groups.append(("mamba_chan", l.mamba_channel_scores))
            for unit, s in groups:
                lines.append(f"{i:>5} {l.kind:>4} {unit:<12} {len(s):>6} "
                             f"{s.min():>10.4g} {s.mean():>10.4g} {s.max():>10.4g}")
        return "\n".join(lines)


def importance_scores(ckpt: Checkpoint, calib_tokens) -> ImportanceReport:
    """Activation-norm importance, averaged over calibration positions.

    MLP neurons: |post-activation|. Heads: L2 norm of the head's attention
    output. Mamba channels: |gated scan output|. Residual channels: |value| in
    the normalized inputs of the layer's mixer and MLP.
    """
    from .quant.apply import collect_inputs

    if calib_tokens is None or len(calib_tokens) == 0:
        raise InputError("importance_scores needs calibration tokens")
    acts = collect_inputs(ckpt, calib_tokens)
    cfg = ckpt.config
    report = ImportanceReport()
    for i, kind in enumerate(cfg.layer_pattern):
        p = f"layers.{i}."
        mlp = np.mean(np.abs(acts[p + "mlp.down.in"]), axis=0)
        mixer_in = acts[p + ("mamba.in_proj.in" if kind == "M" else "attn.q_proj.in")]
        embed = 0.5 * (np.mean(np.abs(mixer_in), axis=0)
                       + np.mean(np.abs(acts[p + "mlp.gate.in"]), axis=0))
        li = LayerImportance(kind, mlp, embed_channel_scores=embed)
        if kind == "M":
            li.mamba_channel_scores = np.mean(np.abs(acts[p + "mamba.out_proj.in"]), axis=0)
        else:
            o = acts[p + "attn.o_proj.in"].reshape(-1, cfg.n_heads, cfg.head_dim)
            li.head_scores = np.mean(np.linalg.norm(o, axis=-1), axis=0)
        report.layers.append(li)
    return report


# --------------------------------------------------------------------------- pruning


@dataclass(frozen=True)
class PruneSpec:
    keep_d_ff: int | None = None
    keep_heads: int | None = None
    keep_d_inner: int | None = None
    keep_d_model: int | None = None

    def validate(self, cfg: ModelConfig) -> None:
        for name, keep, full in (("keep_d_ff", self.keep_d_ff, cfg.d_ff),
                                 ("keep_heads", self.keep_heads, cfg.n_heads),
                                 ("keep_d_inner", self.keep_d_inner, cfg.d_inner),
                                 ("keep_d_model", self.keep_d_model, cfg.d_model)):
            if keep is not None and not 1 <= keep <= full:
                raise ConfigError(f"{name}={keep} must lie in [1, {full}]")
        if self.keep_heads is not None and self.keep_heads % cfg.group_size:
            raise ConfigError(f"keep_heads={self.keep_heads} must be a multiple of the "
                              f"KV group size {cfg.group_size}")


def top_units(scores: np.ndarray, keep: int) -> np.ndarray:
    """Indices of the ``keep`` highest scores (lower index wins ties), ascending."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    return np.sort(order[:keep])


def prune_structured(ckpt: Checkpoint, report: ImportanceReport, spec: PruneSpec) -> Checkpoint:
    """Keep the top-scoring units of each group and slice every affected tensor."""
    cfg = ckpt.config
    spec.validate(cfg)
    t = {k: ckpt.dense(k) for k in ckpt.tensors}
    out = dict(t)
    g = cfg.group_size

    dm = None
    if spec.keep_d_model is not None and spec.keep_d_model < cfg.d_model:
        dm = top_units(report.embed_channel_scores, spec.keep_d_model)

    for i, kind in enumerate(cfg.layer_pattern):
        p = f"layers.{i}."
        li = report.layers[i]
        if spec.keep_d_ff is not None:
            keep = top_units(li.mlp_neuron_scores, spec.keep_d_ff)
            out[p + "mlp.gate"] = t[p + "mlp.gate"][keep]
            out[p + "mlp.up"] = t[p + "mlp.up"][keep]
            out[p + "mlp.down"] = t[p + "mlp.down"][:, keep]
        if kind == "A" and spec.keep_heads is not None:
            group_scores = li.head_scores.reshape(cfg.n_kv_heads, g).sum(axis=1)
            kv_keep = top_units(group_scores, spec.keep_heads // g)
            q_keep = (kv_keep[:, None] * g + np.arange(g)[None, :]).ravel()
            hd = cfg.head_dim
            a = p + "attn."
            out[a + "q_proj"] = t[a + "q_proj"].reshape(cfg.n_heads, hd, -1)[q_keep].reshape(-1, cfg.d_model)
            out[a + "k_proj"] = t[a + "k_proj"].reshape(cfg.n_kv_heads, hd, -1)[kv_keep].reshape(-1, cfg.d_model)
            out[a + "v_proj"] = t[a + "v_proj"].reshape(cfg.n_kv_heads, hd, -1)[kv_keep].reshape(-1, cfg.d_model)
            out[a + "o_proj"] = t[a + "o_proj"].reshape(cfg.d_model, cfg.n_heads, hd)[:, q_keep].reshape(cfg.d_model, -1)
        if kind == "M" and spec.keep_d_inner is not None:
            c = top_units(li.mamba_channel_scores, spec.keep_d_inner)
            q = p + "mamba."
            n = cfg.d_inner
            out[q + "in_proj"] = np.concatenate([t[q + "in_proj"][:n][c], t[q + "in_proj"][n:][c]])
            for leaf in ("conv_weight", "conv_bias", "dt_proj", "dt_bias", "A_log", "D"):
                out[q + leaf] = t[q + leaf][c]
            out[q + "state_proj"] = t[q + "state_proj"][:, c]
            out[q + "out_proj"] = t[q + "out_proj"][:, c]

    if dm is not None:
        for name in list(out):
            leaf = name.rsplit(".", 1)[-1]
            w = out[name]
            if name == "embed":
                out[name] = w[:, dm]
            elif leaf in ("mixer_norm", "mlp_norm", "final_norm"):
                out[name] = w[dm]
            elif leaf in ("in_proj", "q_proj", "k_proj", "v_proj", "gate", "up", "lm_head"):
                out[name] = w[:, dm]
            elif leaf in ("out_proj", "o_proj", "down"):
                out[name] = w[dm]

    changes = {}
    if spec.keep_d_ff is not None:
        changes["d_ff"] = spec.keep_d_ff
    if spec.keep_heads is not None and "A" in cfg.layer_pattern:
        changes["n_heads"] = spec.keep_heads
        changes["n_kv_heads"] = spec.keep_heads // g
    new_d = spec.keep_d_model if dm is not None else cfg.d_model
    new_inner = spec.keep_d_inner if spec.keep_d_inner is not None else cfg.d_inner
    if dm is not None:
        changes["d_model"] = new_d
        if cfg.rank != -(-new_d // 16):
            changes["dt_rank"] = cfg.rank
    if new_inner != cfg.expand * new_d:
        changes["d_inner_override"] = new_inner
    elif cfg.d_inner_override is not None:
        changes["d_inner_override"] = None
    new_cfg = cfg.replace(**changes) if changes else cfg
    if new_cfg.d_inner != new_inner:
        raise ConfigError("internal error: pruned d_inner mismatch")

    tensors = {}
    for i, kind in enumerate(new_cfg.layer_pattern):
        for leaf, shape in layer_shapes(new_cfg, kind).items():
            name = f"layers.{i}.{leaf}"
            if out[name].shape != shape:
                raise ConfigError(f"pruned {name} has shape {out[name].shape}, expected {shape}")
    for name in ckpt.tensors:
        tensors[name] = np.array(out[name], dtype=ckpt.dtype, copy=True)
    return Checkpoint(new_cfg, tensors, dict(ckpt.extra))


# --------------------------------------------------------------------------- distillation


def topk_indices(teacher_logits: np.ndarray, k: int) -> np.ndarray:
    """Per-row indices of the ``k`` largest teacher logits (lower id wins ties)."""
    return np.argsort(-teacher_logits, axis=-1, kind="stable")[..., :k]


def distill_topk_loss(student_logits: np.ndarray, teacher_logits: np.ndarray,
                      k: int) -> tuple[float, np.ndarray]:
    """KL over the teacher's top-k support, averaged over positions.

    The teacher distribution is renormalized over its top-k tokens; the
    student's log-probabilities come from the full-vocabulary log-softmax.
    Returns ``(loss, d loss / d student_logits)``.
    """
    s = np.atleast_2d(np.asarray(student_logits, dtype=np.float64))
    te = np.atleast_2d(np.asarray(teacher_logits, dtype=np.float64))
    if s.shape != te.shape:
        raise InputError(f"student {s.shape} and teacher {te.shape} logits differ in shape")
    seq, V = s.shape
    if not 1 <= k <= V:
        raise ConfigError(f"k={k} must lie in [1, {V}]")
    idx = topk_indices(te, k)
    t_top = np.take_along_axis(te, idx, axis=-1)
    log_pt = log_softmax_lastdim(t_top)
    pt = np.exp(log_pt)
    log_ps = np.take_along_axis(log_softmax_lastdim(s), idx, axis=-1)
    loss = float(np.mean(np.sum(pt * (log_pt - log_ps), axis=-1)))
    grad = softmax_lastdim(s)
    np.put_along_axis(grad, idx, np.take_along_axis(grad, idx, axis=-1) - pt, axis=-1)
    return loss, grad / seq


def distill_lm_head(student: Checkpoint, teacher: Checkpoint, tokens, k: int,
                    steps: int = 0, lr: float = 0.1) -> tuple[Checkpoint, list[float]]:
    """Fit the student's ``lm_head`` to the teacher's top-k distribution.

    Everything below the head is frozen, so the loss gradient with respect to
    the head weight is exact: ``dlogits.T @ hidden``. Returns the updated
    student and the loss before each step plus after the last.
    """
    from .model import model_forward

    if student.config.vocab_size != teacher.config.vocab_size:
        raise ConfigError("student and teacher vocabularies differ")
    if steps < 0 or lr <= 0:
        raise InputError("steps must be >= 0 and lr > 0")
    trace: dict = {}
    model_forward(tokens, student, trace=trace)
    hidden = trace["lm_head.in"][0].astype(np.float64)
    t_logits = model_forward(tokens, teacher).astype(np.float64)
    w = student.dense("lm_head").astype(np.float64)
    history = []
    for _ in range(steps + 1):
        loss, grad = distill_topk_loss(hidden @ w.T, t_logits, k)
        history.append(loss)
        if len(history) > steps:
            break
        w = w - lr * (grad.T @ hidden)
    tensors = dict(student.tensors)
    tensors["lm_head"] = w.astype(np.float32)
    return Checkpoint(student.config, tensors, dict(student.extra)), history
