"""Fuzzy near-duplicate removal with character n-gram MinHash.

Pipeline: normalize (NFKC, lowercase, collapse whitespace), shingle into
character 13-grams, compute a 128-value MinHash signature, connect documents
whose signatures agree on at least 80% of positions, and keep one seeded
random member of each connected component.

Each "permutation" is a seeded 64-bit hash: a keyed BLAKE2b base hash of the
shingle, xor-ed with a per-permutation salt and passed through the splitmix64
finalizer. Candidate pairs come from LSH banding; the band count is chosen so
that any pair over the threshold shares at least one whole band, which makes
the banded search exact at the signature level.
"""

from __future__ import annotations

import hashlib
import math
import re
import unicodedata
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError

_WS = re.compile(r"\s+")
_M1 = np.uint64(0x9E3779B97F4A7C15)
_M2 = np.uint64(0xBF58476D1CE4E5B9)
_M3 = np.uint64(0x94D049BB133111EB)


@dataclass(frozen=True)
class DedupConfig:
    ngram: int = 13
    num_perms: int = 128
    threshold: float = 0.8
    seed: int = 0
    bands: int | None = None  # None: smallest divisor of num_perms that cannot miss a pair

    def __post_init__(self):
        if not 0 < self.threshold <= 1:
            raise ConfigError("threshold must lie in (0, 1]")
        if self.ngram < 1 or self.num_perms < 1:
            raise ConfigError("ngram and num_perms must be >= 1")
        if self.bands is not None and (self.bands < 1 or self.num_perms % self.bands):
            raise ConfigError("bands must divide num_perms")

    @property
    def min_matches(self) -> int:
        """Fewest agreeing positions that reach the threshold."""
        return next(m for m in range(self.num_perms + 1) if m / self.num_perms >= self.threshold)

    @property
    def n_bands(self) -> int:
        if self.bands is not None:
            return self.bands
        max_mismatch = self.num_perms - self.min_matches
        return next(b for b in range(1, self.num_perms + 1)
                    if self.num_perms % b == 0 and b > max_mismatch)


@dataclass(frozen=True)
class Signature:
    values: np.ndarray  # uint64 [num_perms]

    @property
    def num_perms(self) -> int:
        return len(self.values)

    def __eq__(self, other):
        return isinstance(other, Signature) and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash(self.values.tobytes())


def normalize(text: str) -> str:
    return _WS.sub(" ", unicodedata.normalize("NFKC", text).lower()).strip()


def shingle(text: str, ngram: int = 13) -> set[str]:
    """Character n-grams of the normalized text; short texts give one shingle."""
    t = normalize(text)
    if len(t) <= ngram:
        return {t}
    return {t[i:i + ngram] for i in range(len(t) - ngram + 1)}


def _splitmix64(x: np.ndarray) -> np.ndarray:
    z = x + _M1
    z = (z ^ (z >> np.uint64(30))) * _M2
    z = (z ^ (z >> np.uint64(27))) * _M3
    return z ^ (z >> np.uint64(31))


def _salts(cfg: DedupConfig) -> np.ndarray:
    rng = np.random.default_rng(cfg.seed)
    return rng.integers(0, 2**64 - 1, size=cfg.num_perms, dtype=np.uint64, endpoint=True)


def _base_hashes(shingles, seed: int) -> np.ndarray:
    key = seed.to_bytes(8, "little", signed=False)
    return np.fromiter(
        (int.from_bytes(hashlib.blake2b(s.encode("utf-8"), digest_size=8, key=key).digest(),
                        "little") for s in shingles),
        dtype=np.uint64)


def minhash_signature(shingles, cfg: DedupConfig = DedupConfig()) -> Signature:
    shingles = list(shingles)
    if not shingles:
        raise InputError("cannot sign an empty shingle set")
    base = _base_hashes(shingles, cfg.seed & (2**64 - 1))
    with np.errstate(over="ignore"):
        mixed = _splitmix64(base[:, None] ^ _salts(cfg)[None, :])
    return Signature(mixed.min(axis=0))


def similarity(a: Signature, b: Signature) -> float:
    """Fraction of positions where two signatures agree (estimates Jaccard)."""
    if a.num_perms != b.num_perms:
        raise InputError("signatures have different lengths")
    return float(np.mean(a.values == b.values))


class UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def candidate_pairs(sigs: list[Signature], cfg: DedupConfig) -> set[tuple[int, int]]:
    """Pairs sharing at least one identical LSH band."""
    b = cfg.n_bands
    r = cfg.num_perms // b
    pairs: set[tuple[int, int]] = set()
    for band in range(b):
        buckets: dict[bytes, list[int]] = defaultdict(list)
        for i, s in enumerate(sigs):
            buckets[s.values[band * r:(band + 1) * r].tobytes()].append(i)
        for members in buckets.values():
            for x in range(len(members)):
                for y in range(x + 1, len(members)):
                    pairs.add((members[x], members[y]))
    return pairs


def similar_pairs(sigs: list[Signature], cfg: DedupConfig) -> list[tuple[int, int]]:
    """Verified edges: candidate pairs with signature agreement >= threshold."""
    need = cfg.min_matches
    return sorted((i, j) for i, j in candidate_pairs(sigs, cfg)
                  if int(np.sum(sigs[i].values == sigs[j].values)) >= need)


def components(n: int, edges) -> list[list[int]]:
    uf = UnionFind(n)
    for i, j in edges:
        uf.union(i, j)
    groups: dict[int, list[int]] = defaultdict(list)
    for i in range(n):
        groups[uf.find(i)].append(i)
    return sorted(groups.values(), key=lambda g: g[0])


def dedup_signatures(sigs: list[Signature], cfg: DedupConfig = DedupConfig()) -> list[int]:
    comps = components(len(sigs), similar_pairs(sigs, cfg))
    rng = np.random.default_rng(cfg.seed)
    return sorted(comp[int(rng.integers(len(comp)))] for comp in comps)


def signatures(texts, cfg: DedupConfig = DedupConfig(), threads: int | None = None) -> list[Signature]:
    from concurrent.futures import ThreadPoolExecutor

    from .engine import worker_count

    def sign(t):
        return minhash_signature(shingle(t, cfg.ngram), cfg)

    texts = list(texts)
    n = threads or worker_count()
    if n == 1 or len(texts) < 64:
        return [sign(t) for t in texts]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(sign, texts, chunksize=32))


def dedup_corpus(texts, cfg: DedupConfig = DedupConfig()) -> list[int]:
    """Indices (ascending) of the documents kept, one per near-duplicate component."""
    return dedup_signatures(signatures(texts, cfg), cfg)


def expected_band_hit(sim: float, cfg: DedupConfig) -> float:
    """Probability that a pair with agreement ``sim`` becomes an LSH candidate."""
    r = cfg.num_perms // cfg.n_bands
    return 1.0 - (1.0 - sim**r) ** cfg.n_bands


def jaccard(a: set, b: set) -> float:
    return len(a & b) / len(a | b) if a or b else 1.0


def binomial_bound(j: float, num_perms: int, sigmas: float = 3.0) -> float:
    return sigmas * math.sqrt(j * (1 - j) / num_perms)
