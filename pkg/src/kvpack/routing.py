"""Banked fact routing: hashed embeddings, k-means banks, nearest-centroid lookup."""
from __future__ import annotations

import hashlib
import logging
import math
import re
import time
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

EMBED_DIM = 64
FACTS_PER_BANK = 20
_HASH_KEY = b"kvpack-embed-v1"
_WORD = re.compile(r"[a-z0-9]+")


def _as_text(text: str | bytes) -> str:
    return text.decode("utf-8", errors="replace") if isinstance(text, (bytes, bytearray)) else text


@lru_cache(maxsize=65536)
def _word_slot(word: str, dim: int) -> tuple[int, float]:
    h = int.from_bytes(hashlib.blake2b(word.encode("utf-8"), digest_size=8, key=_HASH_KEY).digest(), "little")
    return h % dim, (1.0 if (h >> 63) & 1 == 0 else -1.0)


def embed_text(text: str | bytes, dim: int = EMBED_DIM) -> np.ndarray:
    """Signed feature hashing of lowercase word counts, L2-normalized.

    Empty (or word-free) text maps to the zero vector.
    """
    vec = np.zeros(dim, dtype=np.float64)
    for word in _WORD.findall(_as_text(text).lower()):
        slot, sign = _word_slot(word, dim)
        vec[slot] += sign
    norm = np.sqrt(np.dot(vec, vec))
    if norm > 0:
        vec /= norm
    return vec.astype(np.float32)


def embed_many(texts: Sequence[str | bytes], dim: int = EMBED_DIM) -> np.ndarray:
    if not texts:
        return np.zeros((0, dim), dtype=np.float32)
    return np.stack([embed_text(t, dim) for t in texts])


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def _cosine_rows(mat: np.ndarray, v: np.ndarray) -> np.ndarray:
    m = mat.astype(np.float64)
    v = v.astype(np.float64)
    norms = np.linalg.norm(m, axis=1) * np.linalg.norm(v)
    dots = m @ v
    return np.divide(dots, norms, out=np.zeros_like(dots), where=norms > 0)


# --------------------------------------------------------------------------
# k-means


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    n_iter: int
    distortions: list[float] = field(default_factory=list)

    @property
    def distortion(self) -> float:
        return self.distortions[-1] if self.distortions else 0.0


def _unit_rows(a: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    return np.divide(a, norms, out=np.zeros_like(a), where=norms > 0)


def _seed_centroids(xn: np.ndarray, k: int, rng: np.random.Generator) -> list[int]:
    """Greedy k-means++: draw a few D^2-weighted candidates, keep the best one."""
    n = xn.shape[0]
    trials = 2 + int(np.log(k))
    chosen = [int(rng.integers(n))]
    # squared chord distance between unit vectors, 2 * (1 - cos)
    d2 = 2.0 * (1.0 - xn @ xn[chosen[0]])
    d2 = np.maximum(d2, 0.0)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            taken = set(chosen)
            chosen.append(next(i for i in range(n) if i not in taken))
            continue
        cand = np.searchsorted(np.cumsum(d2), rng.random(trials) * total, side="right")
        cand = np.minimum(cand, n - 1)
        cand_d2 = np.maximum(2.0 * (1.0 - xn[cand] @ xn.T), 0.0)
        pots = np.minimum(d2[None, :], cand_d2).sum(axis=1)
        best = int(np.argmin(pots))
        chosen.append(int(cand[best]))
        d2 = np.minimum(d2, cand_d2[best])
    return chosen


def kmeans(vectors, k: int, seed: int = 0, max_iter: int = 100) -> KMeansResult:
    """Lloyd iterations under cosine similarity with mean centroids.

    Points join the centroid of highest cosine (ties to the lowest index);
    centroids are member means.  Distortion is the sum of ``1 - cos`` and
    never increases.  An empty cluster is re-seeded with the point farthest
    from its current centroid.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("kmeans expects a 2-D array of vectors")
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range 1..{n}")
    rng = np.random.default_rng(seed)
    xn = _unit_rows(x)
    cent = x[_seed_centroids(xn, k, rng)].copy()
    assign = np.full(n, -1, dtype=np.int64)
    distortions: list[float] = []
    it = 0
    rows = np.arange(n)
    for it in range(1, max_iter + 1):
        sims = xn @ _unit_rows(cent).T
        new = np.argmax(sims, axis=1)
        distortions.append(float((1.0 - sims[rows, new]).sum()))
        if np.array_equal(new, assign):
            break
        assign = new
        counts = np.bincount(assign, minlength=k)
        for j in np.flatnonzero(counts == 0):
            own = (xn * _unit_rows(cent)[assign]).sum(axis=1)
            own[counts[assign] <= 1] = np.inf    # never empty another cluster
            idx = int(np.argmin(own))
            counts[assign[idx]] -= 1
            assign[idx] = j
            counts[j] = 1
            cent[j] = x[idx]
        for j in range(k):
            cent[j] = x[assign == j].mean(axis=0)
    return KMeansResult(cent, assign, it, distortions)


# --------------------------------------------------------------------------
# bank index


def default_bank_count(n_facts: int) -> int:
    return max(1, math.ceil(n_facts / FACTS_PER_BANK))


@dataclass(frozen=True, eq=False)
class BankIndex:
    centroids: np.ndarray      # (k, dim) float32
    assignments: np.ndarray    # (N,) int
    facts: tuple[str, ...]
    embeddings: np.ndarray     # (N, dim) float32
    seed: int = 0

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    @property
    def banks(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.k)]
        for i, b in enumerate(self.assignments):
            out[int(b)].append(i)
        return out

    def storage_bytes(self) -> int:
        """Bytes the serialized routing index occupies."""
        from .formats import serialize_index
        return len(serialize_index(self))

    def storage_per_fact(self) -> float:
        return self.storage_bytes() / max(1, len(self.facts))


def build_bank_index(facts: Sequence[str | bytes], k: int | None = None, seed: int = 0,
                     dim: int = EMBED_DIM) -> BankIndex:
    """Embed facts and cluster them into ``k`` banks (default ``ceil(N/20)``).

    Only texts and embeddings are kept; caches are rebuilt on demand.
    """
    if not facts:
        raise ValueError("cannot build a bank index from an empty fact list")
    texts = tuple(_as_text(f) for f in facts)
    emb = embed_many(texts, dim)
    k = default_bank_count(len(texts)) if k is None else k
    res = kmeans(emb, k, seed)
    centroids = res.centroids.astype(np.float32)
    # assign against the stored float32 centroids so routing sees the same numbers
    assign = np.array([int(np.argmax(_cosine_rows(centroids, e))) for e in emb], dtype=np.int64)
    return BankIndex(centroids, assign, texts, emb, seed)


@dataclass
class Route:
    bank: int
    fact_ids: list[int]
    scores: list[float]
    bank_score: float


def route_query(index: BankIndex, query: str | bytes, top_m: int = 1) -> Route:
    """Nearest centroid by cosine, then the bank's facts ranked by cosine."""
    if top_m < 1:
        raise ValueError("top_m must be at least 1")
    q = embed_text(query, index.dim)
    if not q.any():
        log.warning("query %r embeds to the zero vector; routing to bank 0", query)
    bank_scores = _cosine_rows(index.centroids, q)
    # argmax keeps the first maximum, i.e. the lowest bank id on ties
    bank = int(np.argmax(bank_scores))
    members = np.flatnonzero(index.assignments == bank)
    if members.size == 0:
        return Route(bank, [], [], float(bank_scores[bank]))
    sims = _cosine_rows(index.embeddings[members], q)
    order = np.lexsort((members, -sims))
    top = order[:top_m]
    return Route(bank, [int(members[i]) for i in top], [float(sims[i]) for i in top],
                 float(bank_scores[bank]))


@dataclass
class BankAnswer:
    route: Route
    answer: str
    tokens: list[int]
    recompute_ms: float
    route_ms: float
    generate_ms: float
    prompt_tokens: int
    rag_tokens: int


def answer_via_banks(index: BankIndex, query: str, model, template: str = "chatml",
                     max_new: int = 32, top_m: int = 1) -> BankAnswer:
    """Route, rebuild the cache for the top fact(s), then run the read phase."""
    from .pipeline import BuildRequest, build_pack, query_with_pack

    t0 = time.perf_counter()
    route = route_query(index, query, top_m)
    t1 = time.perf_counter()
    facts = [index.facts[i] for i in route.fact_ids]
    pack = build_pack(BuildRequest(facts, template), model)
    t2 = time.perf_counter()
    res = query_with_pack(pack, query, max_new, model)
    t3 = time.perf_counter()
    return BankAnswer(route, res.answer, res.tokens, (t2 - t1) * 1e3, (t1 - t0) * 1e3,
                      (t3 - t2) * 1e3, res.prompt_tokens, res.rag_tokens)


# --------------------------------------------------------------------------
# synthetic corpora

_SYLLABLES = ("ka", "lo", "mi", "zu", "re", "ta", "vo", "ni", "sa", "pe", "qui", "dor",
              "fen", "gal", "hux", "jor", "wy", "bel", "cor", "tis")


def _pseudo_word(rng: np.random.Generator, n_syll: int) -> str:
    return "".join(_SYLLABLES[i] for i in rng.integers(len(_SYLLABLES), size=n_syll))


@dataclass
class SyntheticCorpus:
    facts: list[str]
    queries: list[str]          # same content words as the fact, question form
    open_questions: list[str]   # asks for the value without stating it
    answers: list[str]
    topics: list[int]


def synthetic_corpus(n_facts: int, seed: int = 0, per_topic: int = FACTS_PER_BANK) -> SyntheticCorpus:
    """Fictional facts grouped in topics of ``per_topic`` facts.

    Each topic owns three signature words present in every one of its facts;
    each fact adds a unique two-word entity and a value word.  Facts whose
    embedding would duplicate an earlier one are redrawn.
    """
    rng = np.random.default_rng(seed)
    n_topics = math.ceil(n_facts / per_topic)
    used: set[str] = set()
    seen: set[bytes] = set()

    def fresh(n_syll):
        while True:
            w = _pseudo_word(rng, n_syll)
            if w not in used:
                used.add(w)
                return w

    topic_words = [[fresh(4) for _ in range(3)] for _ in range(n_topics)]
    out = SyntheticCorpus([], [], [], [], [])
    for i in range(n_facts):
        t = i // per_topic
        a, b, c = topic_words[t]
        while True:
            ent1, ent2, value = fresh(4), fresh(4), fresh(3)
            fact = f"In the {a} {b} {c} registry, {ent1} {ent2} is recorded as {value}."
            key = embed_text(fact).tobytes()
            if key not in seen:
                seen.add(key)
                break
        out.facts.append(fact)
        out.queries.append(f"Is {ent1} {ent2} recorded as {value} in the {a} {b} {c} registry?")
        out.open_questions.append(f"What is {ent1} {ent2} recorded as in the {a} {b} {c} registry?")
        out.answers.append(value)
        out.topics.append(t)
    return out
