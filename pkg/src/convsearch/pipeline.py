"""End-to-end conversational search runs.

For each topic the pipeline walks the turns in order: resolve the query
per the configured method, retrieve candidates lexically, optionally
re-rank them with a trained head (threading conversation state through
the chosen top passage), and log what later analysis needs (attention
vectors, top pair embeddings, resolved queries).

A failure inside one topic marks that topic and stops it, keeping the
turns already produced; other topics are unaffected.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from .corpus import InvertedIndex
from .embed import EmbeddingKey, EmbeddingProvider, embed_batch
from .rerank import ConversationState, HeadParams, init_state, rerank_turn
from .retrieval import RankedList, RetrievalConfig, search
from .rewrite import (
    Conversation,
    CorefClusters,
    RewriteProvider,
    build_t5_input,
    coref_pronoun_rewrite,
    fuse_union,
    prefix_rewrite,
    rewrite_via_provider,
    union_plan,
)
from .trec import turn_key

log = logging.getLogger("convsearch.pipeline")

QUERY_METHODS = ("raw", "manual", "auto", "prefix_coref", "t5", "t5_union")

SIDECAR_URL_ENV = "CONVSEARCH_SIDECAR_URL"


class PipelineInputError(ValueError):
    """Missing or inconsistent inputs (queries, clusters, providers)."""


@dataclass(frozen=True)
class PipelineConfig:
    query_method: str = "raw"
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    tag: str = "convsearch"

    def __post_init__(self):
        if self.query_method not in QUERY_METHODS:
            raise ValueError(f"unknown query method: {self.query_method!r}")


@dataclass
class TopicResult:
    topic_id: str
    run: list[RankedList] = field(default_factory=list)
    attention: list[dict] = field(default_factory=list)
    embeddings: list[dict] = field(default_factory=list)
    rewrites: list[dict] = field(default_factory=list)
    error: str | None = None
    failed_turn: int | None = None


@dataclass
class BenchmarkResult:
    run: list[RankedList] = field(default_factory=list)
    topics: list[TopicResult] = field(default_factory=list)

    def failed_topics(self) -> list[TopicResult]:
        return [t for t in self.topics if t.error is not None]

    def attention_records(self) -> list[dict]:
        return [rec for t in self.topics for rec in t.attention]

    def embedding_records(self) -> list[dict]:
        return [rec for t in self.topics for rec in t.embeddings]

    def rewrite_records(self) -> list[dict]:
        return [rec for t in self.topics for rec in t.rewrites]


def _resolve_query(
    conv: Conversation,
    i: int,
    method: str,
    clusters: CorefClusters | None,
    rewrite_provider: RewriteProvider | None,
) -> str:
    turn = conv.turn(i)
    if method == "raw":
        return turn.raw_query
    if method == "manual":
        if turn.manual_query is None:
            raise PipelineInputError(
                f"topic {conv.topic_id}: turn {i} has no manual query"
            )
        return turn.manual_query
    if method == "auto":
        if turn.auto_query is None:
            raise PipelineInputError(
                f"topic {conv.topic_id}: turn {i} has no auto query"
            )
        return turn.auto_query
    if method == "prefix_coref":
        if clusters is None:
            raise PipelineInputError(
                "prefix_coref requires a coreference clusters file"
            )
        resolved = coref_pronoun_rewrite(conv, i, clusters)
        if i == 1:
            return resolved
        first = coref_pronoun_rewrite(conv, 1, clusters)
        return first.strip() + " " + resolved.strip()
    if method in ("t5", "t5_union"):
        if rewrite_provider is None:
            raise PipelineInputError(f"{method} requires a rewrite provider")
        return rewrite_via_provider(build_t5_input(conv, i), rewrite_provider)
    raise PipelineInputError(f"unknown query method: {method!r}")


def run_conversation(
    conv: Conversation,
    index: InvertedIndex,
    docstore: dict[str, str],
    config: PipelineConfig,
    head: HeadParams | None = None,
    embed_provider: EmbeddingProvider | None = None,
    rewrite_provider: RewriteProvider | None = None,
    clusters: CorefClusters | None = None,
) -> TopicResult:
    """Run one topic; on error the result carries the partial output."""
    if head is not None and embed_provider is None:
        raise PipelineInputError("re-ranking requires an embedding provider")
    working = copy.deepcopy(conv)
    result = TopicResult(topic_id=conv.topic_id)
    state: ConversationState | None = init_state(head) if head is not None else None

    for turn in working.turns:
        i = turn.index
        key = turn_key(conv.topic_id, i)
        try:
            query = _resolve_query(
                working, i, config.query_method, clusters, rewrite_provider
            )
            turn.rewritten_query = query
            result.rewrites.append({"topic": conv.topic_id, "turn": i, "query": query})

            if config.query_method == "t5_union":
                plans = union_plan(working, i, query_source="t5")
                searched = [
                    search(index, q, config.retrieval, turn_key=key) for q in plans
                ]
                ranked = fuse_union(searched, config.retrieval.k, turn_key=key)
            else:
                ranked = search(index, query, config.retrieval, turn_key=key)

            if head is not None and ranked.entries:
                keys = []
                for doc_id, _ in ranked.entries:
                    if doc_id not in docstore:
                        raise PipelineInputError(
                            f"doc {doc_id!r} missing from docstore; rebuild the index "
                            f"with passage texts"
                        )
                    keys.append(EmbeddingKey(query, docstore[doc_id]))
                vectors = embed_batch(keys, embed_provider)
                lookup = {
                    doc_id: vec
                    for (doc_id, _), vec in zip(ranked.entries, vectors)
                }
                ranked, state, attention = rerank_turn(head, state, ranked, lookup)
                top_doc = ranked.entries[0][0]
                if attention is not None:
                    result.attention.append(
                        {
                            "topic": conv.topic_id,
                            "turn": i,
                            "attention": [float(a) for a in attention[top_doc]],
                        }
                    )
                result.embeddings.append(
                    {
                        "topic": conv.topic_id,
                        "turn": i,
                        "vector": [float(v) for v in lookup[top_doc]],
                    }
                )

            result.run.append(ranked)
            if ranked.entries:
                turn.top_passage_text = docstore.get(ranked.entries[0][0])
        except Exception as exc:
            result.error = str(exc)
            result.failed_turn = i
            log.warning(
                "topic %s aborted at turn %d (%d turns kept): %s",
                conv.topic_id, i, len(result.run), exc,
            )
            break
    return result


def run_benchmark(
    conversations: list[Conversation],
    index: InvertedIndex,
    docstore: dict[str, str],
    config: PipelineConfig,
    head: HeadParams | None = None,
    embed_provider: EmbeddingProvider | None = None,
    rewrite_provider: RewriteProvider | None = None,
    clusters_by_topic: dict[str, CorefClusters] | None = None,
) -> BenchmarkResult:
    """Run every topic, isolating failures to the topic they occur in."""
    result = BenchmarkResult()
    for conv in conversations:
        clusters = None
        if clusters_by_topic is not None:
            clusters = clusters_by_topic.get(conv.topic_id, CorefClusters())
        topic_result = run_conversation(
            conv,
            index,
            docstore,
            config,
            head=head,
            embed_provider=embed_provider,
            rewrite_provider=rewrite_provider,
            clusters=clusters,
        )
        result.topics.append(topic_result)
        result.run.extend(topic_result.run)
    return result


def benchmark_summary(result: BenchmarkResult, config: PipelineConfig) -> dict:
    """Run manifest: settings, per-topic status, partial-output markers."""
    return {
        "query_method": config.query_method,
        "retrieval_model": config.retrieval.model,
        "tag": config.tag,
        "topics": [
            {
                "topic_id": t.topic_id,
                "turns_completed": len(t.run),
                "status": "ok" if t.error is None else "partial",
                "error": t.error,
                "failed_turn": t.failed_turn,
            }
            for t in result.topics
        ],
    }


def pair_embedding_matrix(records: list[dict]) -> np.ndarray:
    """Stack logged top-pair embeddings into one (n, dim) array."""
    if not records:
        raise ValueError("no embedding records")
    return np.stack([np.asarray(r["vector"], dtype=np.float64) for r in records])
