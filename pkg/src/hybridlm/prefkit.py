"""Preference-optimization numerics: length-regularized DPO with a chosen-SFT
term, reward-gap filtering of preference pairs, and weighted checkpoint merging.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .checkpoint import Checkpoint
from .errors import InputError, SchemaError


@dataclass(frozen=True)
class PreferencePair:
    prompt_len: int
    chosen_len: int
    rejected_len: int
    policy_logp_chosen: float
    policy_logp_rejected: float
    ref_logp_chosen: float
    ref_logp_rejected: float
    reward_chosen: float = 0.0
    reward_rejected: float = 0.0

    def __post_init__(self):
        if self.chosen_len <= 0 or self.rejected_len <= 0:
            raise InputError("response lengths must be positive")
        if max(self.policy_logp_chosen, self.policy_logp_rejected,
               self.ref_logp_chosen, self.ref_logp_rejected) > 0:
            raise InputError("sequence log-probabilities must be <= 0")

    @property
    def reward_gap(self) -> float:
        return self.reward_chosen - self.reward_rejected


@dataclass(frozen=True)
class DpoHyper:
    beta: float = 0.1
    alpha_len: float = 0.0
    gamma_sft: float = 0.0

    def __post_init__(self):
        if not self.beta > 0:
            raise InputError("beta must be positive")
        if self.alpha_len < 0 or self.gamma_sft < 0:
            raise InputError("alpha_len and gamma_sft must be non-negative")


@dataclass(frozen=True)
class DpoGrads:
    policy_logp_chosen: float
    policy_logp_rejected: float
    ref_logp_chosen: float
    ref_logp_rejected: float


def _log_sigmoid(x: float) -> float:
    return -math.log1p(math.exp(-x)) if x >= 0 else x - math.log1p(math.exp(x))


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def dpo_margin(pair: PreferencePair, hp: DpoHyper) -> float:
    ratio_w = pair.policy_logp_chosen - pair.ref_logp_chosen
    ratio_l = pair.policy_logp_rejected - pair.ref_logp_rejected
    return hp.beta * (ratio_w - ratio_l) - hp.alpha_len * (pair.chosen_len - pair.rejected_len)


def dpo_loss(pair: PreferencePair, hp: DpoHyper) -> tuple[float, DpoGrads]:
    """``-log sigmoid(m) + gamma_sft * (-logp_chosen / |chosen|)`` and its gradients.

    The margin ``m`` is the beta-scaled log-ratio difference minus
    ``alpha_len * (|chosen| - |rejected|)``, so longer chosen answers need a
    larger likelihood advantage.
    """
    m = dpo_margin(pair, hp)
    loss = -_log_sigmoid(m) + hp.gamma_sft * (-pair.policy_logp_chosen / pair.chosen_len)
    dm = -_sigmoid(-m)  # d(-log sigmoid(m))/dm
    grads = DpoGrads(
        policy_logp_chosen=dm * hp.beta - hp.gamma_sft / pair.chosen_len,
        policy_logp_rejected=-dm * hp.beta,
        ref_logp_chosen=-dm * hp.beta,
        ref_logp_rejected=dm * hp.beta,
    )
    return loss, grads


def dpo_batch_loss(pairs, hp: DpoHyper) -> float:
    """Mean loss over pairs, reduced in index order."""
    if not pairs:
        raise InputError("empty preference batch")
    return math.fsum(dpo_loss(p, hp)[0] for p in pairs) / len(pairs)


def filter_by_reward_gap(pairs, min_gap: float) -> list[PreferencePair]:
    """Keep pairs whose chosen-minus-rejected reward is at least ``min_gap`` (order kept)."""
    if min_gap < 0:
        raise InputError("min_gap must be non-negative")
    return [p for p in pairs if p.reward_gap >= min_gap]


def select_pair(prompt_len: int, candidates) -> PreferencePair:
    """Highest-reward candidate as chosen, lowest as rejected.

    ``candidates`` are dicts with keys ``len``, ``policy_logp``, ``ref_logp``, ``reward``.
    """
    cands = list(candidates)
    if len(cands) < 2:
        raise InputError("need at least two candidate responses")
    order = sorted(range(len(cands)), key=lambda i: (cands[i]["reward"], -i))
    lo, hi = cands[order[0]], cands[order[-1]]
    return PreferencePair(prompt_len, hi["len"], lo["len"], hi["policy_logp"], lo["policy_logp"],
                          hi["ref_logp"], lo["ref_logp"], hi["reward"], lo["reward"])


# --------------------------------------------------------------------------- pair files

_PAIR_FIELDS = [f.name for f in fields(PreferencePair)]


def read_pairs(path) -> list[PreferencePair]:
    """One JSON object per line with the :class:`PreferencePair` field names."""
    pairs = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                pairs.append(PreferencePair(**{k: rec[k] for k in _PAIR_FIELDS if k in rec}))
            except (json.JSONDecodeError, TypeError) as exc:
                raise InputError(f"{path}:{lineno}: bad preference record: {exc}") from exc
    return pairs


def write_pairs(pairs, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p in pairs:
            f.write(json.dumps(asdict(p)) + "\n")


# --------------------------------------------------------------------------- merging


def merge_weighted(checkpoints, lambdas) -> Checkpoint:
    """Elementwise ``sum_i lambda_i * theta_i`` over identical f32 tensor tables."""
    cks = list(checkpoints)
    lam = [float(x) for x in lambdas]
    if not cks or len(cks) != len(lam):
        raise InputError("need one lambda per checkpoint")
    if abs(math.fsum(lam) - 1.0) > 1e-9:
        raise InputError(f"lambdas must sum to 1, got {math.fsum(lam)!r}")
    first = cks[0]
    for c in cks[1:]:
        if list(c.tensors) != list(first.tensors):
            raise SchemaError("checkpoints have different tensor names")
        for name, t in c.tensors.items():
            ref = first.tensors[name]
            if not isinstance(t, np.ndarray) or not isinstance(ref, np.ndarray):
                raise SchemaError(f"tensor {name!r} is quantized; merge needs float tensors")
            if t.shape != ref.shape or t.dtype != ref.dtype:
                raise SchemaError(f"tensor {name!r}: {t.shape}/{t.dtype} vs {ref.shape}/{ref.dtype}")
        if c.config != first.config:
            raise SchemaError("checkpoints have different model configs")
    tensors = {}
    for name, ref in first.tensors.items():
        acc = np.zeros(ref.shape, dtype=np.float64)
        for c, l in zip(cks, lam):
            acc += l * c.tensors[name].astype(np.float64)
        tensors[name] = acc.astype(ref.dtype)
    return Checkpoint(first.config, tensors, dict(first.extra))
