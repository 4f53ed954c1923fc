"""End-to-end topic runs: query methods, re-ranking, failure isolation."""

import numpy as np
import pytest

from convsearch.corpus import AnalysisConfig, PassageDoc, build_index
from convsearch.embed import SyntheticEmbeddingProvider
from convsearch.pipeline import (
    PipelineConfig,
    PipelineInputError,
    benchmark_summary,
    pair_embedding_matrix,
    run_benchmark,
    run_conversation,
)
from convsearch.rerank import init_head
from convsearch.retrieval import RetrievalConfig, search
from convsearch.rewrite import CorefClusters, EchoRewriteProvider, Mention, fuse_union
from convsearch.trec import turn_key

from conftest import make_conversation

PLAIN = AnalysisConfig(stemmer="none", stopwords=frozenset())

DOCS = [
    PassageDoc("V", "volcanoes science erupt lava"),
    PassageDoc("G", "glaciers science carve valleys"),
    PassageDoc("X", "stars science shine bright"),
]


@pytest.fixture
def corpus():
    index = build_index(DOCS, PLAIN)
    docstore = {doc.id: doc.text for doc in DOCS}
    return index, docstore


def plain_pipeline(method="raw", k=1000):
    return PipelineConfig(
        query_method=method,
        retrieval=RetrievalConfig(k=k),
    )


class TestHeadlessRetrieval:
    def test_raw_method_is_pure_retrieval(self, corpus):
        index, docstore = corpus
        conv = make_conversation(["volcanoes", "science"], topic_id="t")
        result = run_conversation(conv, index, docstore, plain_pipeline())
        assert result.error is None
        assert len(result.run) == 2
        for i, query in enumerate(["volcanoes", "science"], start=1):
            direct = search(index, query, RetrievalConfig(), turn_key=turn_key("t", i))
            assert result.run[i - 1].entries == direct.entries
            assert result.run[i - 1].turn_key == direct.turn_key

    def test_turn_keys_number_from_one(self, corpus):
        index, docstore = corpus
        conv = make_conversation(["science", "science"], topic_id="31")
        result = run_conversation(conv, index, docstore, plain_pipeline())
        assert [r.turn_key for r in result.run] == ["31_1", "31_2"]

    def test_rewrites_logged_every_turn(self, corpus):
        index, docstore = corpus
        conv = make_conversation(["volcanoes", "science"], topic_id="t")
        result = run_conversation(conv, index, docstore, plain_pipeline())
        assert result.rewrites == [
            {"topic": "t", "turn": 1, "query": "volcanoes"},
            {"topic": "t", "turn": 2, "query": "science"},
        ]

    def test_input_conversation_unmodified(self, corpus):
        index, docstore = corpus
        conv = make_conversation(["volcanoes", "science"], topic_id="t")
        run_conversation(conv, index, docstore, plain_pipeline())
        assert conv.turns[0].rewritten_query is None
        assert conv.turns[0].top_passage_text is None

    def test_no_match_turn_yields_empty_list(self, corpus):
        index, docstore = corpus
        conv = make_conversation(["zebras"], topic_id="t")
        result = run_conversation(conv, index, docstore, plain_pipeline())
        assert result.error is None
        assert result.run[0].entries == []


class TestQueryMethods:
    def test_manual_method(self, corpus):
        index, docstore = corpus
        conv = make_conversation(["raw one", "raw two"], topic_id="t")
        conv.turns[0].manual_query = "volcanoes"
        conv.turns[1].manual_query = "science"
        config = plain_pipeline("manual")
        result = run_conversation(conv, index, docstore, config)
        assert result.error is None
        assert result.rewrites[0]["query"] == "volcanoes"

    def test_manual_missing_marks_topic_partial(self, corpus):
        index, docstore = corpus
        conv = make_conversation(["volcanoes", "science"], topic_id="t")
        conv.turns[0].manual_query = "volcanoes"
        result = run_conversation(conv, index, docstore, plain_pipeline("manual"))
        assert len(result.run) == 1
        assert result.failed_turn == 2
        assert "no manual query" in result.error

    def test_auto_method(self, corpus):
        index, docstore = corpus
        conv = make_conversation(["x"], topic_id="t")
        conv.turns[0].auto_query = "science"
        result = run_conversation(conv, index, docstore, plain_pipeline("auto"))
        assert result.error is None
        assert len(result.run[0].entries) == 3

    def test_prefix_coref_concatenates_resolved_queries(self, corpus):
        index, docstore = corpus
        conv = make_conversation(["the volcanoes", "they erupt"], topic_id="t")
        clusters = CorefClusters(
            [[Mention(1, 0, 13, "the volcanoes"), Mention(2, 0, 4, "they")]]
        )
        config = plain_pipeline("prefix_coref")
        result = run_conversation(conv, index, docstore, config, clusters=clusters)
        assert result.rewrites[0]["query"] == "the volcanoes"
        assert result.rewrites[1]["query"] == "the volcanoes the volcanoes erupt"

    def test_prefix_coref_requires_clusters(self, corpus):
        index, docstore = corpus
        conv = make_conversation(["volcanoes"], topic_id="t")
        result = run_conversation(conv, index, docstore, plain_pipeline("prefix_coref"))
        assert "requires a coreference clusters" in result.error

    def test_t5_method_uses_provider(self, corpus):
        index, docstore = corpus
        conv = make_conversation(["volcanoes", "science"], topic_id="t")
        result = run_conversation(
            conv, index, docstore, plain_pipeline("t5"),
            rewrite_provider=EchoRewriteProvider(),
        )
        # the echo provider returns the pre-context chunk: the current query
        assert [r["query"] for r in result.rewrites] == ["volcanoes", "science"]
        assert result.error is None

    def test_t5_requires_provider(self, corpus):
        index, docstore = corpus
        conv = make_conversation(["volcanoes"], topic_id="t")
        result = run_conversation(conv, index, docstore, plain_pipeline("t5"))
        assert "requires a rewrite provider" in result.error

    def test_t5_union_matches_hand_fused_retrieval(self, corpus):
        index, docstore = corpus
        conv = make_conversation(["volcanoes", "glaciers", "science"], topic_id="t")
        result = run_conversation(
            conv, index, docstore, plain_pipeline("t5_union"),
            rewrite_provider=EchoRewriteProvider(),
        )
        assert result.error is None
        # with the echo provider each turn's rewrite is its raw query, so the
        # turn-3 union retrieves "volcanoes science" and "glaciers science"
        config = RetrievalConfig()
        expected = fuse_union(
            [
                search(index, "volcanoes science", config, turn_key="t_3"),
                search(index, "glaciers science", config, turn_key="t_3"),
            ],
            config.k,
            turn_key="t_3",
        )
        assert result.run[2].entries == expected.entries

    def test_t5_union_first_turn_is_plain_search(self, corpus):
        index, docstore = corpus
        conv = make_conversation(["volcanoes"], topic_id="t")
        result = run_conversation(
            conv, index, docstore, plain_pipeline("t5_union"),
            rewrite_provider=EchoRewriteProvider(),
        )
        direct = search(index, "volcanoes", RetrievalConfig(), turn_key="t_1")
        assert result.run[0].entries == direct.entries


class TestReranking:
    def test_head_requires_embed_provider(self, corpus):
        index, docstore = corpus
        conv = make_conversation(["volcanoes"], topic_id="t")
        head = init_head("linear", 16)
        with pytest.raises(PipelineInputError, match="embedding provider"):
            run_conversation(conv, index, docstore, plain_pipeline(), head=head)

    def test_rerank_keeps_candidate_set(self, corpus):
        index, docstore = corpus
        conv = make_conversation(["science", "science"], topic_id="t")
        provider = SyntheticEmbeddingProvider(dim=16)
        head = init_head("gru", 16, hidden=8, seed=0)
        plain = run_conversation(conv, index, docstore, plain_pipeline())
        headed = run_conversation(
            conv, index, docstore, plain_pipeline(),
            head=head, embed_provider=provider,
        )
        for before, after in zip(plain.run, headed.run):
            assert sorted(before.doc_ids()) == sorted(after.doc_ids())

    def test_rerank_scores_are_probabilities(self, corpus):
        index, docstore = corpus
        conv = make_conversation(["science"], topic_id="t")
        provider = SyntheticEmbeddingProvider(dim=16)
        head = init_head("linear", 16, seed=1)
        result = run_conversation(
            conv, index, docstore, plain_pipeline(),
            head=head, embed_provider=provider,
        )
        for _, score in result.run[0].entries:
            assert 0.0 < score < 1.0

    def test_single_turn_memnet_equals_linear(self, corpus):
        index, docstore = corpus
        conv = make_conversation(["science"], topic_id="t")
        provider = SyntheticEmbeddingProvider(dim=16)
        results = {}
        for kind in ("memnet", "linear"):
            head = init_head(kind, 16, seed=3)
            results[kind] = run_conversation(
                conv, index, docstore, plain_pipeline(),
                head=head, embed_provider=provider,
            )
        assert results["memnet"].run[0].entries == results["linear"].run[0].entries

    def test_second_turn_memnet_differs_from_linear(self, corpus):
        index, docstore = corpus
        conv = make_conversation(["volcanoes", "science"], topic_id="t")
        provider = SyntheticEmbeddingProvider(dim=16)
        scores = {}
        for kind in ("memnet", "linear"):
            head = init_head(kind, 16, seed=3)
            result = run_conversation(
                conv, index, docstore, plain_pipeline(),
                head=head, embed_provider=provider,
            )
            scores[kind] = dict(result.run[1].entries)
        # same parameter table, but the stored turn-1 memory shifts the scores
        diffs = [
            abs(scores["memnet"][d] - scores["linear"][d]) for d in scores["linear"]
        ]
        assert max(diffs) > 1e-6

    def test_memnet_attention_logged_from_second_turn(self, corpus):
        index, docstore = corpus
        conv = make_conversation(["volcanoes", "science", "science"], topic_id="t")
        provider = SyntheticEmbeddingProvider(dim=16)
        head = init_head("memnet", 16, seed=0)
        result = run_conversation(
            conv, index, docstore, plain_pipeline(),
            head=head, embed_provider=provider,
        )
        assert [rec["turn"] for rec in result.attention] == [2, 3]
        assert len(result.attention[0]["attention"]) == 1
        assert len(result.attention[1]["attention"]) == 2
        assert abs(sum(result.attention[1]["attention"]) - 1.0) < 1e-9

    def test_top_pair_embedding_logged_per_turn(self, corpus):
        index, docstore = corpus
        conv = make_conversation(["volcanoes", "science"], topic_id="t")
        provider = SyntheticEmbeddingProvider(dim=16)
        head = init_head("linear", 16, seed=0)
        result = run_conversation(
            conv, index, docstore, plain_pipeline(),
            head=head, embed_provider=provider,
        )
        assert [rec["turn"] for rec in result.embeddings] == [1, 2]
        assert all(len(rec["vector"]) == 16 for rec in result.embeddings)
        matrix = pair_embedding_matrix(result.embeddings)
        assert matrix.shape == (2, 16)

    def test_missing_docstore_text_marks_topic(self, corpus):
        index, _ = corpus
        conv = make_conversation(["volcanoes"], topic_id="t")
        provider = SyntheticEmbeddingProvider(dim=16)
        head = init_head("linear", 16)
        result = run_conversation(
            conv, index, {}, plain_pipeline(),
            head=head, embed_provider=provider,
        )
        assert "missing from docstore" in result.error
        assert result.failed_turn == 1

    def test_deterministic_rerun(self, corpus):
        index, docstore = corpus
        conv = make_conversation(["volcanoes", "science"], topic_id="t")
        head = init_head("memnet", 16, seed=5)
        runs = []
        for _ in range(2):
            provider = SyntheticEmbeddingProvider(dim=16)
            result = run_conversation(
                conv, index, docstore, plain_pipeline(),
                head=head, embed_provider=provider,
            )
            runs.append(result)
        assert [r.entries for r in runs[0].run] == [r.entries for r in runs[1].run]
        assert runs[0].embeddings == runs[1].embeddings


class TestBenchmark:
    def test_failure_isolation(self, corpus):
        index, docstore = corpus
        good = make_conversation(["volcanoes"], topic_id="good")
        good.turns[0].manual_query = "volcanoes"
        bad = make_conversation(["volcanoes", "science"], topic_id="bad")
        bad.turns[0].manual_query = "volcanoes"
        # second turn of "bad" is missing its manual query
        result = run_benchmark([bad, good], index, docstore, plain_pipeline("manual"))
        assert len(result.failed_topics()) == 1
        failed = result.failed_topics()[0]
        assert failed.topic_id == "bad"
        assert failed.failed_turn == 2
        assert len(failed.run) == 1  # partial output kept
        # the combined run carries the partial turns plus the good topic
        assert [r.turn_key for r in result.run] == ["bad_1", "good_1"]

    def test_summary_statuses(self, corpus):
        index, docstore = corpus
        good = make_conversation(["volcanoes"], topic_id="good")
        good.turns[0].manual_query = "volcanoes"
        bad = make_conversation(["x"], topic_id="bad")
        config = plain_pipeline("manual")
        result = run_benchmark([bad, good], index, docstore, config)
        summary = benchmark_summary(result, config)
        by_topic = {t["topic_id"]: t for t in summary["topics"]}
        assert by_topic["good"]["status"] == "ok"
        assert by_topic["good"]["error"] is None
        assert by_topic["bad"]["status"] == "partial"
        assert by_topic["bad"]["turns_completed"] == 0
        assert by_topic["bad"]["failed_turn"] == 1
        assert summary["query_method"] == "manual"
        assert summary["retrieval_model"] == "lmd"

    def test_clusters_routed_by_topic(self, corpus):
        index, docstore = corpus
        conv = make_conversation(["the volcanoes", "they erupt"], topic_id="t")
        clusters = CorefClusters(
            [[Mention(1, 0, 13, "the volcanoes"), Mention(2, 0, 4, "they")]]
        )
        result = run_benchmark(
            [conv], index, docstore, plain_pipeline("prefix_coref"),
            clusters_by_topic={"t": clusters},
        )
        assert result.topics[0].error is None
        assert "erupt" in result.topics[0].rewrites[1]["query"]

    def test_topic_without_clusters_gets_empty_default(self, corpus):
        index, docstore = corpus
        conv = make_conversation(["volcanoes"], topic_id="t")
        result = run_benchmark(
            [conv], index, docstore, plain_pipeline("prefix_coref"),
            clusters_by_topic={},
        )
        # empty clusters resolve nothing but are not an error
        assert result.topics[0].error is None
        assert result.topics[0].rewrites[0]["query"] == "volcanoes"

    def test_aggregated_records(self, corpus):
        index, docstore = corpus
        convs = [
            make_conversation(["volcanoes", "science"], topic_id="a"),
            make_conversation(["glaciers"], topic_id="b"),
        ]
        provider = SyntheticEmbeddingProvider(dim=16)
        head = init_head("memnet", 16, seed=0)
        result = run_benchmark(
            convs, index, docstore, plain_pipeline(),
            head=head, embed_provider=provider,
        )
        assert {r["topic"] for r in result.embedding_records()} == {"a", "b"}
        assert len(result.rewrite_records()) == 3
        # only topic "a" reaches a turn with stored memories
        assert {r["topic"] for r in result.attention_records()} == {"a"}


class TestConfig:
    def test_unknown_method_rejected(self):
        with pytest.raises(ValueError, match="unknown query method"):
            PipelineConfig(query_method="neural")

    def test_pair_matrix_empty(self):
        with pytest.raises(ValueError, match="no embedding records"):
            pair_embedding_matrix([])
