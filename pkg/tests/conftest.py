"""Shared fixtures and brute-force oracles for the test suite."""

from __future__ import annotations

import math
import random

import numpy as np
import pytest

from convsearch.corpus import AnalysisConfig, PassageDoc, build_index
from convsearch.rewrite import Conversation, Turn


@pytest.fixture
def tiny_index():
    """The two-document worked example: d1 "cat sat", d2 "dog ran fast"."""
    docs = [PassageDoc("d1", "cat sat"), PassageDoc("d2", "dog ran fast")]
    return build_index(docs, AnalysisConfig())


@pytest.fixture
def plain_config():
    """Analysis with no stopwords and no stemming, for exact token control."""
    return AnalysisConfig(stemmer="none", stopwords=frozenset())


def make_conversation(queries: list[str], topic_id: str = "t") -> Conversation:
    return Conversation(
        topic_id=topic_id,
        turns=[Turn(index=i, raw_query=q) for i, q in enumerate(queries, start=1)],
    )


# ---------------------------------------------------------------------------
# Brute-force retrieval oracle, independent of the index machinery.


def random_token_corpus(rng: random.Random, max_docs: int = 50):
    """Random short documents over a small vocabulary, as raw token lists."""
    vocab = [f"w{j}" for j in range(rng.randint(3, 12))]
    n_docs = rng.randint(1, max_docs)
    docs = {}
    for d in range(n_docs):
        length = rng.randint(1, 12)
        docs[f"d{d:03d}"] = [rng.choice(vocab) for _ in range(length)]
    query = [rng.choice(vocab) for _ in range(rng.randint(1, 4))]
    return docs, query


def brute_force_scores(docs: dict[str, list[str]], query: list[str], model: str,
                       mu: float = 1000.0, lam: float = 0.5,
                       k1: float = 0.9, b: float = 0.4) -> dict[str, float]:
    """Score every doc containing >=1 query term, straight from token lists."""
    total = sum(len(t) for t in docs.values())
    cf = {}
    for tokens in docs.values():
        for t in tokens:
            cf[t] = cf.get(t, 0) + 1
    n = len(docs)
    avgdl = total / n if n else 0.0
    out = {}
    for doc_id, tokens in docs.items():
        if not any(t in tokens for t in query):
            continue
        dlen = len(tokens)
        score = 0.0
        for term in query:
            c = cf.get(term, 0)
            if c == 0:
                continue
            tf = tokens.count(term)
            if model == "lmd":
                score += math.log((tf + mu * c / total) / (dlen + mu))
            elif model == "lmjm":
                doc_part = tf / dlen if dlen else 0.0
                smoothed = (1.0 - lam) * doc_part + lam * c / total
                score += math.log(smoothed) if smoothed > 0 else float("-inf")
            else:
                df = sum(1 for toks in docs.values() if term in toks)
                idf = math.log((n - df + 0.5) / (df + 0.5) + 1.0)
                norm = k1 * (1.0 - b + b * dlen / avgdl) if avgdl else k1
                score += idf * tf * (k1 + 1.0) / (tf + norm)
        out[doc_id] = score
    return out


def brute_force_topk(scores: dict[str, float], k: int) -> list[tuple[str, float]]:
    return sorted(scores.items(), key=lambda p: (-p[1], p[0]))[:k]


# ---------------------------------------------------------------------------
# Finite-difference gradient checking.


def numeric_gradients(fn, params, h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central finite differences of fn() w.r.t. every parameter entry."""
    grads = {}
    for name, arr in params.arrays.items():
        g = np.zeros_like(arr)
        flat = arr.ravel()
        gflat = g.ravel()
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            hi = fn()
            flat[idx] = orig - h
            lo = fn()
            flat[idx] = orig
            gflat[idx] = (hi - lo) / (2.0 * h)
        grads[name] = g
    return grads


def max_relative_error(analytic: dict, numeric: dict) -> float:
    worst = 0.0
    for name in analytic:
        a = analytic[name].ravel()
        n = numeric[name].ravel()
        denom = np.maximum(np.abs(a) + np.abs(n), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
