"""Lexical first-stage retrieval over the inverted index.

Three scoring models: query-likelihood with Dirichlet smoothing (lmd),
query-likelihood with Jelinek-Mercer smoothing (lmjm), and BM25.  All of
them iterate the query token list with multiplicity, so a repeated query
term contributes once per occurrence.  Terms absent from the collection
are skipped and contribute zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .corpus import InvertedIndex, tokenize

_MODELS = ("lmd", "bm25", "lmjm")


@dataclass(frozen=True)
class RetrievalConfig:
    model: str = "lmd"
    mu: float = 1000.0
    lam: float = 0.5
    k1: float = 0.9
    b: float = 0.4
    k: int = 1000

    def __post_init__(self):
        if self.model not in _MODELS:
            raise ValueError(f"unknown retrieval model: {self.model!r}")
        if self.mu <= 0:
            raise ValueError(f"mu must be positive, got {self.mu}")
        if not 0.0 < self.lam < 1.0:
            raise ValueError(f"lambda must be in (0, 1), got {self.lam}")
        if self.k1 < 0 or not 0.0 <= self.b <= 1.0:
            raise ValueError(f"invalid bm25 parameters k1={self.k1} b={self.b}")
        if self.k <= 0:
            raise ValueError(f"result depth k must be positive, got {self.k}")


@dataclass
class RankedList:
    """Scored documents for one turn, scores non-increasing.

    Ties are broken by ascending doc id; `entries` is a list of
    (doc_id, score) pairs.
    """

    turn_key: str
    entries: list[tuple[str, float]] = field(default_factory=list)

    def doc_ids(self) -> list[str]:
        return [doc_id for doc_id, _ in self.entries]

    def truncated(self, k: int) -> "RankedList":
        return RankedList(self.turn_key, list(self.entries[:k]))


def score_lmd(
    index: InvertedIndex, query_tokens: list[str], doc_id: str, mu: float = 1000.0
) -> float:
    """Dirichlet-smoothed query log likelihood:
    sum_t log((tf + mu * p(t|C)) / (|d| + mu)).
    """
    dlen = index.doc_lengths[doc_id]
    total = index.total_tokens
    score = 0.0
    for term in query_tokens:
        cf = index.cf(term)
        if cf == 0:
            continue
        tf = index.term_frequency(term, doc_id)
        score += math.log((tf + mu * cf / total) / (dlen + mu))
    return score


def score_lmjm(
    index: InvertedIndex, query_tokens: list[str], doc_id: str, lam: float = 0.5
) -> float:
    """Jelinek-Mercer smoothed query log likelihood:
    sum_t log((1 - lam) * tf / |d| + lam * p(t|C)).
    """
    dlen = index.doc_lengths[doc_id]
    total = index.total_tokens
    score = 0.0
    for term in query_tokens:
        cf = index.cf(term)
        if cf == 0:
            continue
        tf = index.term_frequency(term, doc_id)
        doc_part = tf / dlen if dlen else 0.0
        smoothed = (1.0 - lam) * doc_part + lam * cf / total
        score += math.log(smoothed) if smoothed > 0.0 else float("-inf")
    return score


def score_bm25(
    index: InvertedIndex,
    query_tokens: list[str],
    doc_id: str,
    k1: float = 0.9,
    b: float = 0.4,
) -> float:
    """Okapi BM25 with idf = log((N - df + 0.5) / (df + 0.5) + 1)."""
    dlen = index.doc_lengths[doc_id]
    n = index.doc_count
    avgdl = index.avg_doc_length
    score = 0.0
    for term in query_tokens:
        df = index.df(term)
        if df == 0:
            continue
        tf = index.term_frequency(term, doc_id)
        idf = math.log((n - df + 0.5) / (df + 0.5) + 1.0)
        norm = k1 * (1.0 - b + b * dlen / avgdl) if avgdl else k1
        score += idf * tf * (k1 + 1.0) / (tf + norm)
    return score


def candidate_docs(index: InvertedIndex, query_tokens: list[str]) -> list[str]:
    """Docs containing at least one query term, via the postings union."""
    seen: set[str] = set()
    for term in set(query_tokens):
        for doc_id, _ in index.postings_for(term):
            seen.add(doc_id)
    return sorted(seen)


def _scorer(config: RetrievalConfig):
    if config.model == "lmd":
        return lambda index, toks, doc: score_lmd(index, toks, doc, config.mu)
    if config.model == "lmjm":
        return lambda index, toks, doc: score_lmjm(index, toks, doc, config.lam)
    return lambda index, toks, doc: score_bm25(index, toks, doc, config.k1, config.b)


def search(
    index: InvertedIndex,
    query: str,
    config: RetrievalConfig | None = None,
    turn_key: str = "0_1",
) -> RankedList:
    """Analyze the query, score candidates, return the top-k ranked list.

    An empty query (after analysis) yields an empty list.  Results are
    sorted by score descending with ascending doc id breaking ties.
    """
    if config is None:
        config = RetrievalConfig()
    tokens = tokenize(query, index.config)
    if not tokens:
        return RankedList(turn_key)
    score = _scorer(config)
    scored = [(doc, score(index, tokens, doc)) for doc in candidate_docs(index, tokens)]
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return RankedList(turn_key, scored[: config.k])
