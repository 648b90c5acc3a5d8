"""Long-context retrieval harness.

Token-level Phonebook and Passkey generators, exact-match scoring, accuracy
grids over (context length x answer depth), a constructed-weights sliding
window copy model whose accuracy drops to zero past its receptive field, and
a checkpoint sweep that balances retrieval against a perplexity proxy.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .checkpoint import Checkpoint, load
from .config import preset
from .errors import ConfigError, HybridLMError, InputError, LoadError
from .numkit import log_softmax_lastdim

PHONEBOOK = "phonebook"
PASSKEY = "passkey"
TASKS = (PHONEBOOK, PASSKEY)

ModelFn = Callable[[Sequence[int], int], Sequence[int]]


@dataclass(frozen=True)
class TaskVocab:
    """Disjoint token ranges used by the synthetic tasks.

    Markers: ``sep`` ends phonebook entries and opens passkey prompts,
    ``query`` opens the question, ``key_marker`` precedes the passkey.
    """

    size: int = 64
    sep: int = 0
    query: int = 1
    key_marker: int = 2
    digit_lo: int = 4
    n_digits: int = 8
    name_lo: int = 12
    n_names: int = 16
    filler_lo: int = 28
    n_filler: int = 36

    def __post_init__(self):
        ranges = [(self.digit_lo, self.n_digits), (self.name_lo, self.n_names),
                  (self.filler_lo, self.n_filler)]
        ranges += [(t, 1) for t in (self.sep, self.query, self.key_marker)]
        used = np.zeros(self.size, dtype=np.int64)
        for lo, n in ranges:
            if n < 1 or lo < 0 or lo + n > self.size:
                raise ConfigError(f"token range [{lo}, {lo + n}) does not fit vocab {self.size}")
            used[lo:lo + n] += 1
        if used.max() > 1:
            raise ConfigError("task token ranges overlap")

    def digits(self) -> np.ndarray:
        return np.arange(self.digit_lo, self.digit_lo + self.n_digits)

    def names(self) -> np.ndarray:
        return np.arange(self.name_lo, self.name_lo + self.n_names)

    def filler(self) -> np.ndarray:
        return np.arange(self.filler_lo, self.filler_lo + self.n_filler)

    def is_digit(self, tok: int) -> bool:
        return self.digit_lo <= tok < self.digit_lo + self.n_digits


@dataclass(frozen=True)
class RetrievalCase:
    prompt_tokens: tuple
    answer_tokens: tuple
    context_len: int
    depth: float
    task: str
    answer_pos: int  # index of the first answer token inside the prompt

    @property
    def answer_distance(self) -> int:
        """Tokens from the first answer token to the last prompt position."""
        return len(self.prompt_tokens) - 1 - self.answer_pos


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def _distinct_tuples(rng, alphabet: np.ndarray, length: int, count: int) -> list[tuple]:
    space = len(alphabet) ** length
    if count > space:
        raise ConfigError(f"need {count} distinct codes but only {space} exist")
    codes = rng.choice(space, size=count, replace=False)
    out = []
    for c in codes:
        digits = []
        for _ in range(length):
            c, r = divmod(int(c), len(alphabet))
            digits.append(int(alphabet[r]))
        out.append(tuple(digits))
    return out


def gen_phonebook(n_entries: int, query_index: int, seed, vocab: TaskVocab = TaskVocab(),
                  name_len: int = 2, number_len: int = 3) -> RetrievalCase:
    """Directory of ``name number sep`` entries followed by ``query name``."""
    if n_entries < 1 or not 0 <= query_index < n_entries:
        raise ConfigError("need 0 <= query_index < n_entries")
    rng = _rng(seed)
    names = _distinct_tuples(rng, vocab.names(), name_len, n_entries)
    numbers = _distinct_tuples(rng, vocab.digits(), number_len, n_entries)
    prompt: list[int] = []
    answer_pos = -1
    for i, (nm, num) in enumerate(zip(names, numbers)):
        prompt.extend(nm)
        if i == query_index:
            answer_pos = len(prompt)
        prompt.extend(num)
        prompt.append(vocab.sep)
    prompt.append(vocab.query)
    prompt.extend(names[query_index])
    depth = query_index / (n_entries - 1) if n_entries > 1 else 0.0
    return RetrievalCase(tuple(prompt), numbers[query_index], len(prompt), depth, PHONEBOOK,
                         answer_pos)


def passkey_layout(target_len: int, depth: float, key_len: int) -> tuple[int, int]:
    """(statement start, key start) for a passkey prompt.

    The prompt is ``sep | filler... key_marker key... filler... | query``;
    the statement slides across the filler body with ``depth``.
    """
    if not 0.0 <= depth <= 1.0:
        raise ConfigError("depth must lie in [0, 1]")
    body = target_len - 2
    stmt = key_len + 1
    if key_len < 1 or body < stmt:
        raise ConfigError(f"target_len {target_len} cannot hold a {key_len}-token key")
    start = 1 + int(round(depth * (body - stmt)))
    return start, start + 1


def gen_passkey(target_len: int, depth: float, seed, vocab: TaskVocab = TaskVocab(),
                key_len: int = 5) -> RetrievalCase:
    start, key_at = passkey_layout(target_len, depth, key_len)
    rng = _rng(seed)
    key = tuple(int(t) for t in rng.choice(vocab.digits(), size=key_len))
    prompt = rng.choice(vocab.filler(), size=target_len).astype(np.int64)
    prompt[0] = vocab.sep
    prompt[start] = vocab.key_marker
    prompt[key_at:key_at + key_len] = key
    prompt[-1] = vocab.query
    return RetrievalCase(tuple(int(t) for t in prompt), key, target_len, float(depth), PASSKEY,
                         key_at)


def contains_run(haystack: Sequence[int], needle: Sequence[int]) -> bool:
    n, h = list(needle), list(haystack)
    if not n:
        return True
    return any(h[i:i + len(n)] == n for i in range(len(h) - len(n) + 1))


def score_exact(output_tokens: Sequence[int], case: RetrievalCase) -> int:
    """1 iff the answer occurs contiguously within the first 64 output tokens."""
    return int(contains_run(list(output_tokens)[:64], case.answer_tokens))


# --------------------------------------------------------------------------- grids


@dataclass
class AccuracyGrid:
    lengths: list
    depths: list
    acc: np.ndarray
    n_trials: int
    task: str = PASSKEY

    def __post_init__(self):
        self.acc = np.asarray(self.acc, dtype=np.float64)
        if self.acc.shape != (len(self.lengths), len(self.depths)):
            raise InputError("accuracy matrix must be |lengths| x |depths|")

    def to_table(self) -> str:
        head = "length\\depth " + " ".join(f"{d:>6.2f}" for d in self.depths)
        rows = [f"{L:>12d} " + " ".join(f"{a:>6.3f}" for a in row)
                for L, row in zip(self.lengths, self.acc)]
        return "\n".join([head, *rows])

    def to_csv(self) -> str:
        lines = ["length,depth,accuracy,n"]
        for L, row in zip(self.lengths, self.acc):
            for d, a in zip(self.depths, row):
                lines.append(f"{L},{d:g},{a:.6f},{self.n_trials}")
        return "\n".join(lines) + "\n"


def cell_seed(seed: int, li: int, di: int, trial: int) -> int:
    return int(np.random.SeedSequence([seed, li, di, trial]).generate_state(1, np.uint64)[0])


def make_case(task: str, length: int, depth: float, seed, vocab: TaskVocab = TaskVocab(),
              key_len: int = 5) -> RetrievalCase:
    if task == PASSKEY:
        return gen_passkey(length, depth, seed, vocab, key_len)
    if task == PHONEBOOK:
        entry = 2 + 3 + 1
        n = max(1, (length - 3) // entry)
        return gen_phonebook(n, int(round(depth * (n - 1))), seed, vocab)
    raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")


def run_grid(model: ModelFn, lengths, depths, n_trials: int, seed: int = 0,
             task: str = PASSKEY, vocab: TaskVocab = TaskVocab(), key_len: int = 5,
             threads: int = 1) -> AccuracyGrid:
    """Mean exact-match score per (length, depth) cell.

    ``model(prompt, max_new)`` must decode greedily. Cells are independent and
    may run in parallel; aggregation is by cell index so ordering is irrelevant.
    """
    if n_trials < 1:
        raise InputError("n_trials must be >= 1")
    lengths, depths = [int(x) for x in lengths], [float(x) for x in depths]
    jobs = [(li, di, t) for li in range(len(lengths)) for di in range(len(depths))
            for t in range(n_trials)]

    def work(job):
        li, di, t = job
        L, d = lengths[li], depths[di]
        try:
            case = make_case(task, L, d, cell_seed(seed, li, di, t), vocab, key_len)
            out = model(list(case.prompt_tokens), len(case.answer_tokens))
            return score_exact(out, case)
        except HybridLMError as exc:
            raise type(exc)(f"cell (length={L}, depth={d}, trial={t}): {exc}") from exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            scores = list(pool.map(work, jobs))
    else:
        scores = [work(j) for j in jobs]
    acc = np.zeros((len(lengths), len(depths)))
    for (li, di, _), s in zip(jobs, scores):
        acc[li, di] += s
    return AccuracyGrid(lengths, depths, acc / n_trials, n_trials, task)


# --------------------------------------------------------------------------- reference models


def echo_oracle(vocab: TaskVocab = TaskVocab(), task: str = PASSKEY, name_len: int = 2,
                number_len: int = 3) -> ModelFn:
    """A perfect reader: parses the prompt and returns the embedded answer."""
    def read(prompt, max_new):
        p = list(prompt)
        if task == PASSKEY:
            at = p.index(vocab.key_marker) + 1
            key = []
            while at < len(p) and vocab.is_digit(p[at]) and len(key) < max_new:
                key.append(p[at])
                at += 1
            return key
        name = p[-name_len:]
        entry = name_len + number_len + 1
        for s in range(0, len(p) - name_len - 1, entry):
            if p[s:s + name_len] == name:
                return p[s + name_len:s + name_len + number_len]
        return []
    return read


def constant_oracle(token: int) -> ModelFn:
    return lambda prompt, max_new: [token] * max(1, max_new)


def greedy_runner(ckpt: Checkpoint, kv_dtype: str = "bf16") -> ModelFn:
    from .engine import SamplerParams, Session, generate

    def run(prompt, max_new):
        return generate(Session(ckpt, kv_dtype), prompt, max_new, SamplerParams())
    return run


def build_copy_model(vocab: TaskVocab = TaskVocab(), gain: float = 10.0) -> Checkpoint:
    """Two sliding-window attention layers that copy the single digit in the prompt.

    Layer 0 lets every position pick up a digit within its window; layer 1 lets
    the last position pick up any position that did. With window ``W`` the
    answer survives exactly up to distance ``2 * (W - 1)``; beyond that every
    attention value feeding the output is exactly zero and the model falls
    back to a filler token.

    Residual layout (d_model 32): 0 digit flag, 1 constant, 2..9 digit one-hot,
    10..17 carried one-hot, 18 carried flag. Query/key content sits in the last
    rotary pair, which barely rotates at theta 1e6.
    """
    cfg = preset("phonebook-demo")
    if vocab.n_digits != 8 or vocab.size != cfg.vocab_size:
        raise ConfigError("the copy model is wired for 8 digits in a 64-token vocabulary")
    d, hd = cfg.d_model, cfg.head_dim
    qk = hd - 2  # first component of the last rotary pair in head 0
    t: dict[str, np.ndarray] = {}
    emb = np.zeros((cfg.vocab_size, d), np.float32)
    emb[:, 1] = 1.0
    for j, tok in enumerate(vocab.digits()):
        emb[tok, 0] = 1.0
        emb[tok, 2 + j] = 1.0
    t["embed"] = emb
    for i, (flag, src) in enumerate([(0, 2), (18, 10)]):
        p = f"layers.{i}."
        q = np.zeros((cfg.n_heads * hd, d), np.float32)
        k = np.zeros((cfg.n_kv_heads * hd, d), np.float32)
        v = np.zeros((cfg.n_kv_heads * hd, d), np.float32)
        o = np.zeros((d, cfg.n_heads * hd), np.float32)
        q[qk, 1] = gain
        k[qk, flag] = gain
        for j in range(8):
            v[j, src + j] = 1.0
            o[10 + j, j] = 1.0
        v[8, flag] = 1.0
        o[18, 8] = 1.0
        t[p + "mixer_norm"] = np.ones(d, np.float32)
        t[p + "mlp_norm"] = np.ones(d, np.float32)
        t[p + "attn.q_proj"], t[p + "attn.k_proj"] = q, k
        t[p + "attn.v_proj"], t[p + "attn.o_proj"] = v, o
        t[p + "mlp.gate"] = np.zeros((cfg.d_ff, d), np.float32)
        t[p + "mlp.up"] = np.zeros((cfg.d_ff, d), np.float32)
        t[p + "mlp.down"] = np.zeros((d, cfg.d_ff), np.float32)
    t["final_norm"] = np.ones(d, np.float32)
    head = np.zeros((cfg.vocab_size, d), np.float32)
    for j, tok in enumerate(vocab.digits()):
        head[tok, 10 + j] = 1.0
    head[vocab.filler_lo, 1] = 0.1
    t["lm_head"] = head
    return Checkpoint(cfg, t, {"origin": "constructed copy model"})


def receptive_field(cfg) -> int:
    """Farthest token an all-attention stack can see from the last position."""
    if "M" in cfg.layer_pattern or cfg.window is None:
        return math.inf
    return cfg.n_layers * (cfg.window - 1)


# --------------------------------------------------------------------------- checkpoint sweep


def fluency_score(ckpt: Checkpoint, tokens) -> float:
    """Mean next-token log-likelihood (negative log-perplexity) on held-out tokens."""
    from .model import model_forward

    toks = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if toks.size < 2:
        raise InputError("fluency proxy needs at least two held-out tokens")
    logp = log_softmax_lastdim(model_forward(toks[:-1], ckpt).astype(np.float64))
    return float(np.mean(logp[np.arange(toks.size - 1), toks[1:]]))


@dataclass(frozen=True)
class GridSpec:
    lengths: tuple = (16, 32)
    depths: tuple = (0.0, 0.5, 1.0)
    n_trials: int = 2
    seed: int = 0
    task: str = PASSKEY
    key_len: int = 5


@dataclass
class SweepReport:
    names: list
    retrieval: np.ndarray
    fluency: np.ndarray
    combined: np.ndarray
    selected: int
    weights: tuple = (0.5, 0.5)
    grids: list = field(default_factory=list)

    def to_table(self) -> str:
        lines = [f"{'checkpoint':<28} {'retrieval':>10} {'fluency':>10} {'combined':>9}"]
        for i, n in enumerate(self.names):
            mark = " *" if i == self.selected else ""
            lines.append(f"{str(n):<28} {self.retrieval[i]:>10.4f} {self.fluency[i]:>10.4f} "
                         f"{self.combined[i]:>9.4f}{mark}")
        return "\n".join(lines)


def minmax(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    span = x.max() - x.min()
    return np.zeros_like(x) if span == 0 else (x - x.min()) / span


def select_balanced(scores, weights=(0.5, 0.5)) -> tuple[int, np.ndarray]:
    """Index maximizing the weighted sum of min-max normalized metrics.

    Ties go to the candidate whose worst normalized metric is highest, then to
    the lowest index.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] < 1:
        raise InputError("scores must be [n_checkpoints, n_metrics]")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (s.shape[1],):
        raise InputError("one weight per metric")
    norm = np.stack([minmax(s[:, j]) for j in range(s.shape[1])], axis=1)
    combined = norm @ w
    best = combined.max()
    tied = [i for i in range(len(combined)) if math.isclose(combined[i], best, abs_tol=1e-12)]
    pick = max(tied, key=lambda i: (norm[i].min(), -i))
    return pick, combined


def checkpoint_sweep(checkpoints, grid: GridSpec, heldout_tokens=None,
                     fluency: Callable[[Checkpoint], float] | None = None,
                     weights=(0.5, 0.5), vocab: TaskVocab = TaskVocab()) -> SweepReport:
    """Score each checkpoint on retrieval and fluency and pick the best balance.

    ``checkpoints`` holds paths or :class:`Checkpoint` objects.
    """
    items = list(checkpoints)
    if not items:
        raise InputError("need at least one checkpoint")
    if fluency is None:
        if heldout_tokens is None:
            raise InputError("give held-out tokens or a fluency scorer")
        fluency = lambda ck: fluency_score(ck, heldout_tokens)  # noqa: E731
    names, ret, flu, grids = [], [], [], []
    for i, item in enumerate(items):
        if isinstance(item, Checkpoint):
            ck, name = item, f"#{i}"
        else:
            try:
                ck = load(item)
            except (HybridLMError, OSError) as exc:
                raise LoadError(f"cannot read checkpoint {item}: {exc}") from exc
            name = str(item)
        g = run_grid(greedy_runner(ck), grid.lengths, grid.depths, grid.n_trials, grid.seed,
                     grid.task, vocab, grid.key_len)
        names.append(name)
        grids.append(g)
        ret.append(float(g.acc.mean()))
        flu.append(float(fluency(ck)))
    pick, combined = select_balanced(np.stack([ret, flu], axis=1), weights)
    return SweepReport(names, np.array(ret), np.array(flu), combined, pick, tuple(weights), grids)
