"""Stateful inference: prefill, decode, chunked prefill, sampling and chat rendering."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint
from .errors import ConfigError, InputError
from .model import model_forward, new_states
from .numkit import softmax_lastdim
from .state import session_memory_bytes


class Session:
    """Inference state for one sequence. Not safe for concurrent use."""

    def __init__(self, ckpt: Checkpoint, kv_dtype: str = "bf16", kv_specs: dict | None = None,
                 session_id: int = 0):
        self.ckpt = ckpt
        self.cfg = ckpt.config
        self.session_id = session_id
        self.states = new_states(self.cfg, ckpt.dtype, kv_dtype, kv_specs)
        self.pos = 0

    def memory_bytes(self) -> int:
        return session_memory_bytes(self)


@dataclass(frozen=True)
class SamplerParams:
    temperature: float = 0.0
    top_p: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ConfigError("top_p must lie in (0, 1]")


def _check_tokens(tokens, vocab: int) -> np.ndarray:
    arr = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if arr.size and (arr.min() < 0 or arr.max() >= vocab):
        raise InputError(f"token ids must lie in [0, {vocab})")
    return arr


def _run_span(session: Session, tokens: np.ndarray) -> np.ndarray:
    # one-token work items take the recurrent step path, longer spans the block scan
    mode = "step" if len(tokens) == 1 else "scan"
    return model_forward(tokens, session.ckpt, session, mode=mode)


def prefill(session: Session, tokens) -> np.ndarray:
    """Consume ``tokens`` in one span; return logits at the last position."""
    arr = _check_tokens(tokens, session.cfg.vocab_size)
    if arr.size == 0:
        raise InputError("prefill needs at least one token")
    return _run_span(session, arr)[-1]


def decode(session: Session, token: int) -> np.ndarray:
    arr = _check_tokens([token], session.cfg.vocab_size)
    return _run_span(session, arr)[-1]


@dataclass(frozen=True)
class WorkItem:
    kind: str  # "prefill" or "decode"
    start: int
    stop: int


def plan_chunks(n_tokens: int, chunk_size: int) -> list[WorkItem]:
    if chunk_size < 1:
        raise ConfigError("chunk_size must be >= 1")
    items = []
    for s in range(0, n_tokens, chunk_size):
        e = min(n_tokens, s + chunk_size)
        items.append(WorkItem("decode" if e - s == 1 else "prefill", s, e))
    return items


def chunked_prefill(session: Session, tokens, chunk_size: int) -> np.ndarray:
    """Prefill in consecutive chunks, carrying all state; same contract as :func:`prefill`."""
    if chunk_size < 1:
        raise ConfigError("chunk_size must be >= 1")
    arr = _check_tokens(tokens, session.cfg.vocab_size)
    if arr.size == 0:
        raise InputError("prefill needs at least one token")
    logits = None
    for item in plan_chunks(arr.size, chunk_size):
        logits = _run_span(session, arr[item.start:item.stop])
    return logits[-1]


def sample_token(logits: np.ndarray, sampler: SamplerParams, rng: np.random.Generator) -> int:
    """Greedy (lowest id on ties) at temperature 0, otherwise top-p nucleus sampling."""
    logits = np.asarray(logits, dtype=np.float64)
    if sampler.temperature == 0:
        return int(np.argmax(logits))
    probs = softmax_lastdim(logits / sampler.temperature)
    order = np.argsort(-probs, kind="stable")
    cum = np.cumsum(probs[order])
    keep = int(np.searchsorted(cum, sampler.top_p - 1e-12, side="left")) + 1
    keep = min(keep, len(order))
    kept = order[:keep]
    p = probs[kept] / probs[kept].sum()
    return int(kept[rng.choice(keep, p=p)])


def generate(session: Session, prompt, max_new: int, sampler: SamplerParams | None = None,
             chunk_size: int | None = None) -> list[int]:
    """Prefill ``prompt`` and sample ``max_new`` tokens.

    Nothing limits the length to ``cfg.max_train_len``; finite-window configs
    keep constant state size however long generation runs.
    """
    if max_new < 0:
        raise InputError("max_new must be >= 0")
    sampler = sampler or SamplerParams()
    rng = np.random.default_rng(sampler.seed)
    prompt = _check_tokens(prompt, session.cfg.vocab_size)
    if prompt.size == 0:
        raise InputError("generate needs a non-empty prompt")
    if chunk_size:
        logits = chunked_prefill(session, prompt, chunk_size)
    else:
        logits = prefill(session, prompt)
    out: list[int] = []
    for i in range(max_new):
        tok = sample_token(logits, sampler, rng)
        out.append(tok)
        if i + 1 < max_new:
            logits = decode(session, tok)
    return out


def worker_count(default: int | None = None) -> int:
    env = os.environ.get("PLC2_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return default or min(8, os.cpu_count() or 1)


@dataclass(frozen=True)
class GenerationJob:
    session_id: int
    prompt: tuple
    max_new: int
    sampler: SamplerParams = SamplerParams()


def run_batch(ckpt: Checkpoint, jobs: list[GenerationJob],
              threads: int | None = None) -> list[tuple[int, list[int]]]:
    """Run independent sessions in parallel; results sorted by session id."""
    def work(job: GenerationJob):
        s = Session(ckpt, session_id=job.session_id)
        return job.session_id, generate(s, list(job.prompt), job.max_new, job.sampler)

    with ThreadPoolExecutor(max_workers=threads or worker_count()) as pool:
        results = list(pool.map(work, jobs))
    return sorted(results, key=lambda r: r[0])


# --------------------------------------------------------------------------- chat template

OP_TOKEN = "<|plamo:op|>"
ROLES = ("system", "user", "assistant", "input", "output")


def render_chat(messages) -> str:
    """Render ``(role, text)`` pairs, then open a reply turn.

    Each message is ``<|plamo:op|>{role}\\n{text}``. The reply turn is
    ``assistant``, or ``output`` when the transcript carries an ``input`` role.
    """
    parts = []
    reply = "assistant"
    for role, text in messages:
        if role not in ROLES:
            raise InputError(f"unknown role {role!r}; expected one of {ROLES}")
        if OP_TOKEN in text:
            raise InputError("message text may not contain the separator token")
        if role == "input":
            reply = "output"
        parts.append(f"{OP_TOKEN}{role}\n{text}")
    parts.append(f"{OP_TOKEN}{reply}\n")
    return "".join(parts)


def render_instruction(instruction: str, task_input: str, system: str | None = None) -> str:
    """Instruction as the user turn, task data as contextual ``input``."""
    messages = [("system", system)] if system else []
    messages += [("user", instruction), ("input", task_input)]
    return render_chat(messages)
