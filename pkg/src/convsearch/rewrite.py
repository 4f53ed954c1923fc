"""Conversational query rewriting.

Turns arrive underspecified (pronouns, ellipsis), so the first-stage query
is rebuilt from conversation context before retrieval.  Four mechanisms
live here: first-query prefixing, the pairwise union plan with max-score
fusion, a closed-class pronoun substitution driven by coreference clusters
supplied as data, and a text-to-text rewrite delegated to a provider.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

from .corpus import _load_wordlist
from .retrieval import RankedList

log = logging.getLogger("convsearch.rewrite")

CTX_TOKEN = "[CTX]"
TURN_TOKEN = "[TURN]"

_QUERY_SOURCES = ("raw", "t5")


def pronoun_list() -> frozenset[str]:
    """The bundled closed pronoun list used by the substitution rule."""
    return _load_wordlist("pronouns_en.txt")


@dataclass
class Turn:
    index: int
    raw_query: str
    manual_query: str | None = None
    auto_query: str | None = None
    rewritten_query: str | None = None
    top_passage_text: str | None = None


@dataclass
class Conversation:
    topic_id: str
    turns: list[Turn] = field(default_factory=list)

    def __post_init__(self):
        for pos, turn in enumerate(self.turns, start=1):
            if turn.index != pos:
                raise ValueError(
                    f"topic {self.topic_id}: turn indices must be 1..n contiguous, "
                    f"found {turn.index} at position {pos}"
                )

    def turn(self, i: int) -> Turn:
        if not 1 <= i <= len(self.turns):
            raise ValueError(f"topic {self.topic_id}: no turn {i}")
        return self.turns[i - 1]


@dataclass(frozen=True)
class Mention:
    turn: int
    start: int
    end: int
    surface: str


@dataclass
class CorefClusters:
    clusters: list[list[Mention]] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Rewrite mechanisms.


def _glue(left: str, right: str) -> str:
    return left.strip() + " " + right.strip()


def prefix_rewrite(conv: Conversation, i: int) -> str:
    """First query prepended to the current one; turn 1 passes through."""
    current = conv.turn(i)
    if i == 1:
        return current.raw_query
    return _glue(conv.turn(1).raw_query, current.raw_query)


def _source_query(conv: Conversation, j: int, query_source: str) -> str:
    turn = conv.turn(j)
    if query_source == "raw":
        return turn.raw_query
    if turn.rewritten_query is None:
        raise ValueError(f"topic {conv.topic_id}: turn {j} has no rewritten query")
    return turn.rewritten_query


def union_plan(conv: Conversation, i: int, query_source: str = "raw") -> list[str]:
    """Queries to retrieve with for turn i before fusion.

    One query for the first two turns (turn 2 is the turn-1 prefix), and
    for later turns one pairwise combination of each earlier query with
    the current one, so the plan has i - 1 entries.
    """
    if query_source not in _QUERY_SOURCES:
        raise ValueError(f"unknown query source: {query_source!r}")
    current = _source_query(conv, i, query_source)
    if i == 1:
        return [current]
    if i == 2:
        return [_glue(_source_query(conv, 1, query_source), current)]
    return [
        _glue(_source_query(conv, j, query_source), current) for j in range(1, i)
    ]


def fuse_union(lists: list[RankedList], k: int, turn_key: str | None = None) -> RankedList:
    """Merge ranked lists keeping each doc's maximum score, then re-sort.

    Sorting is by score descending with ascending doc id on ties, truncated
    to k entries.  Fusing a single list reproduces it (up to truncation).
    """
    if k <= 0:
        raise ValueError(f"fusion depth k must be positive, got {k}")
    if turn_key is None:
        turn_key = lists[0].turn_key if lists else ""
    best: dict[str, float] = {}
    for ranked in lists:
        for doc_id, score in ranked.entries:
            if doc_id not in best or score > best[doc_id]:
                best[doc_id] = score
    merged = sorted(best.items(), key=lambda pair: (-pair[1], pair[0]))
    return RankedList(turn_key, merged[:k])


def _contains_pronoun(surface: str, pronouns: frozenset[str]) -> bool:
    words = [w for w in "".join(c if c.isalnum() else " " for c in surface.lower()).split()]
    return any(w in pronouns for w in words)


def _validate_clusters(conv: Conversation, clusters: CorefClusters) -> None:
    spans_by_turn: dict[int, list[tuple[int, int]]] = {}
    for cluster in clusters.clusters:
        ordered = sorted(cluster, key=lambda m: (m.turn, m.start))
        if list(cluster) != ordered:
            raise ValueError(
                f"topic {conv.topic_id}: cluster mentions must be ordered by "
                f"(turn, span start)"
            )
        for mention in cluster:
            if not 1 <= mention.turn <= len(conv.turns):
                raise ValueError(
                    f"topic {conv.topic_id}: mention turn {mention.turn} out of range"
                )
            query = conv.turn(mention.turn).raw_query
            if not 0 <= mention.start < mention.end <= len(query):
                raise ValueError(
                    f"topic {conv.topic_id}: mention span ({mention.start}, "
                    f"{mention.end}) invalid in turn {mention.turn}"
                )
            if query[mention.start : mention.end] != mention.surface:
                raise ValueError(
                    f"topic {conv.topic_id}: mention surface {mention.surface!r} does "
                    f"not match turn {mention.turn} span ({mention.start}, {mention.end})"
                )
            spans_by_turn.setdefault(mention.turn, []).append(
                (mention.start, mention.end)
            )
    for turn_index, spans in spans_by_turn.items():
        spans.sort()
        for (s1, e1), (s2, _) in zip(spans, spans[1:]):
            if s2 < e1:
                raise ValueError(
                    f"topic {conv.topic_id}: overlapping mention spans in turn "
                    f"{turn_index}"
                )


def coref_pronoun_rewrite(
    conv: Conversation,
    i: int,
    clusters: CorefClusters,
    pronouns: frozenset[str] | None = None,
) -> str:
    """Replace pronoun-bearing cluster mentions in turn i with the antecedent.

    The antecedent is the cluster's first mention surface.  Replacements are
    applied right-to-left so earlier spans stay valid.  Queries without any
    eligible mention come back unchanged.
    """
    if pronouns is None:
        pronouns = pronoun_list()
    _validate_clusters(conv, clusters)
    query = conv.turn(i).raw_query
    replacements: list[tuple[Mention, str]] = []
    for cluster in clusters.clusters:
        if not cluster:
            continue
        antecedent = cluster[0].surface
        for mention in cluster:
            if mention.turn == i and _contains_pronoun(mention.surface, pronouns):
                replacements.append((mention, antecedent))
    replacements.sort(key=lambda pair: pair[0].start, reverse=True)
    for mention, antecedent in replacements:
        query = query[: mention.start] + antecedent + query[mention.end :]
    return query


def build_t5_input(conv: Conversation, i: int) -> str:
    """Serialize the current query plus history for the text-to-text rewriter.

    Format: "q_i [CTX] q_1 p_1 [TURN] q_2 p_2 ..." where p_j is turn j's top
    passage text when available and omitted otherwise.  Turn 1 has no
    history, so it serializes as "q_1 [CTX]".
    """
    parts = [conv.turn(i).raw_query.strip(), CTX_TOKEN]
    for j in range(1, i):
        if j > 1:
            parts.append(TURN_TOKEN)
        past = conv.turn(j)
        parts.append(past.raw_query.strip())
        if past.top_passage_text:
            parts.append(past.top_passage_text.strip())
    return " ".join(parts)


# ---------------------------------------------------------------------------
# Provider-backed rewriting.


class RewriteTransportError(RuntimeError):
    """Raised when a rewrite provider cannot be reached or times out."""


class RewriteProvider(Protocol):
    def rewrite(self, input_text: str) -> str: ...


class EchoRewriteProvider:
    """Degenerate provider returning the current query unchanged."""

    def rewrite(self, input_text: str) -> str:
        return input_text.split(CTX_TOKEN, 1)[0].strip()


def split_rewrite_input(input_text: str) -> tuple[str, list[str]]:
    """Split a flat rewrite input into the current query and history chunks."""
    current, _, rest = input_text.partition(CTX_TOKEN)
    history = [chunk.strip() for chunk in rest.split(TURN_TOKEN)]
    return current.strip(), [chunk for chunk in history if chunk]


class SidecarRewriteProvider:
    """HTTP client for the rewrite endpoint of the model server."""

    def __init__(self, base_url: str, timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def rewrite(self, input_text: str) -> str:
        import requests

        current, history = split_rewrite_input(input_text)
        try:
            response = requests.post(
                f"{self.base_url}/rewrite",
                json={"current": current, "history": history},
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise RewriteTransportError(f"rewrite request failed: {exc}") from exc
        if response.status_code != 200:
            raise RewriteTransportError(
                f"rewrite endpoint returned HTTP {response.status_code}"
            )
        try:
            body = response.json()
            rewritten = body["rewritten"]
        except (ValueError, KeyError, TypeError) as exc:
            raise RewriteTransportError(f"malformed rewrite response: {exc}") from exc
        if body.get("empty"):
            return ""
        return str(rewritten)


def rewrite_via_provider(input_text: str, provider: RewriteProvider) -> str:
    """Ask the provider for a rewrite, falling back to the raw query.

    Transport problems surface as RewriteTransportError.  An empty response
    is not an error: the raw query (the part before the context marker) is
    used instead and a warning is logged.
    """
    rewritten = provider.rewrite(input_text)
    rewritten = (rewritten or "").strip()
    if not rewritten:
        fallback = input_text.split(CTX_TOKEN, 1)[0].strip()
        log.warning("empty rewrite from provider, falling back to raw query %r", fallback)
        return fallback
    return rewritten


# ---------------------------------------------------------------------------
# Topic and cluster files.


def _parse_topics(payload) -> list[Conversation]:
    if isinstance(payload, dict):
        payload = payload.get("topics", [])
    conversations = []
    for topic in payload:
        turns = [
            Turn(
                index=int(t["index"]),
                raw_query=str(t["raw"]),
                manual_query=t.get("manual"),
                auto_query=t.get("auto"),
            )
            for t in topic["turns"]
        ]
        conversations.append(Conversation(topic_id=str(topic["topic_id"]), turns=turns))
    return conversations


def load_topics(path: str | Path) -> list[Conversation]:
    """Read a topics file: a JSON list of {topic_id, turns: [{index, raw, ...}]}."""
    with open(path, encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: malformed topics file: {exc}") from exc
    return _parse_topics(payload)


def load_clusters(path: str | Path) -> dict[str, CorefClusters]:
    """Read a coreference sidecar file keyed by topic id."""
    with open(path, encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: malformed clusters file: {exc}") from exc
    result: dict[str, CorefClusters] = {}
    for record in payload:
        clusters = [
            [
                Mention(
                    turn=int(m["turn"]),
                    start=int(m["start"]),
                    end=int(m["end"]),
                    surface=str(m["surface"]),
                )
                for m in cluster
            ]
            for cluster in record["clusters"]
        ]
        result[str(record["topic_id"])] = CorefClusters(clusters)
    return result
