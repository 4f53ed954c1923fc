"""Command-line interface.

Subcommands: index, search, rewrite, train, run, evaluate, bleu, and
analyze (attention | embeddings).  Exit codes: 0 on success, 1 for input
errors (bad arguments, missing or malformed files), 2 for runtime
failures (unreachable services, internal errors).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import corpus as corpus_mod
from . import evaluation, figures, train as train_mod, trec
from .embed import (
    CachedEmbeddingProvider,
    EmbeddingCache,
    SidecarEmbeddingProvider,
    SyntheticEmbeddingProvider,
    TopicalSyntheticProvider,
)
from .pipeline import (
    SIDECAR_URL_ENV,
    BenchmarkResult,
    PipelineConfig,
    PipelineInputError,
    benchmark_summary,
    run_benchmark,
)
from .rerank import HEAD_KINDS, export_head_json, load_head, save_head
from .retrieval import RetrievalConfig, search
from .rewrite import (
    EchoRewriteProvider,
    SidecarRewriteProvider,
    build_t5_input,
    coref_pronoun_rewrite,
    load_clusters,
    load_topics,
    prefix_rewrite,
    rewrite_via_provider,
    union_plan,
)


def _add_retrieval_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--model", default="lmd", choices=("lmd", "bm25", "lmjm"))
    parser.add_argument("--mu", type=float, default=1000.0)
    parser.add_argument("--lam", type=float, default=0.5)
    parser.add_argument("--k1", type=float, default=0.9)
    parser.add_argument("--b", type=float, default=0.4)
    parser.add_argument("--k", type=int, default=1000, help="retrieval depth")


def _retrieval_config(args) -> RetrievalConfig:
    return RetrievalConfig(
        model=args.model, mu=args.mu, lam=args.lam, k1=args.k1, b=args.b, k=args.k
    )


def _add_embed_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--embedder",
        default="synthetic",
        choices=("synthetic", "topical", "sidecar"),
        help="pair embedding source",
    )
    parser.add_argument("--embed-dim", type=int, default=None)
    parser.add_argument("--embed-seed", type=int, default=0)
    parser.add_argument("--embed-cache", default=None, help="on-disk cache file")
    parser.add_argument(
        "--sidecar-url",
        default=None,
        help=f"model server base URL (default: ${SIDECAR_URL_ENV})",
    )


def _sidecar_url(args) -> str:
    url = args.sidecar_url or os.environ.get(SIDECAR_URL_ENV)
    if not url:
        raise PipelineInputError(
            f"no sidecar URL: pass --sidecar-url or set {SIDECAR_URL_ENV}"
        )
    return url


def _build_embed_provider(args):
    dim = args.embed_dim
    if args.embedder == "synthetic":
        provider = SyntheticEmbeddingProvider(dim or 768, args.embed_seed)
    elif args.embedder == "topical":
        provider = TopicalSyntheticProvider(dim or 768, args.embed_seed)
    else:
        provider = SidecarEmbeddingProvider(_sidecar_url(args), expected_dim=dim)
    if args.embed_cache:
        provider = CachedEmbeddingProvider(provider, EmbeddingCache(args.embed_cache))
    return provider


def _build_rewrite_provider(args):
    if args.rewriter == "echo":
        return EchoRewriteProvider()
    return SidecarRewriteProvider(_sidecar_url(args))


def _load_index_and_docstore(index_dir: str):
    index = corpus_mod.load_index(index_dir)
    docstore_path = Path(index_dir) / "docstore.jsonl.gz"
    docstore = (
        corpus_mod.load_docstore(docstore_path) if docstore_path.exists() else {}
    )
    return index, docstore


# ---------------------------------------------------------------------------
# Subcommands.


def cmd_index(args) -> int:
    if args.stopwords == "default":
        stopwords = corpus_mod.default_stopwords()
    elif args.stopwords == "none":
        stopwords = frozenset()
    else:
        stopwords = frozenset(
            w.strip()
            for w in Path(args.stopwords).read_text("utf-8").splitlines()
            if w.strip() and not w.startswith("#")
        )
    config = corpus_mod.AnalysisConfig(
        stemmer=args.stemmer, stopwords=stopwords, lowercase=not args.keep_case
    )
    docs = list(corpus_mod.read_corpus(args.corpus))
    index = corpus_mod.build_index(docs, config)
    corpus_mod.save_index(index, args.out)
    corpus_mod.save_docstore(docs, Path(args.out) / "docstore.jsonl.gz")
    print(
        f"indexed {index.doc_count} docs, {index.vocabulary_size} terms, "
        f"{index.total_tokens} tokens -> {args.out}"
    )
    return 0


def cmd_search(args) -> int:
    index, _ = _load_index_and_docstore(args.index)
    ranked = search(index, args.query, _retrieval_config(args), turn_key=args.turn_key)
    if args.out:
        trec.write_run([ranked], args.out, tag=args.tag)
        print(f"wrote {len(ranked.entries)} results -> {args.out}")
    else:
        for rank, (doc_id, score) in enumerate(ranked.entries, start=1):
            print(f"{ranked.turn_key} Q0 {doc_id} {rank} {score!r} {args.tag}")
    return 0


def cmd_rewrite(args) -> int:
    conversations = load_topics(args.topics)
    clusters_by_topic = load_clusters(args.clusters) if args.clusters else {}
    provider = None
    if args.method == "t5":
        provider = _build_rewrite_provider(args)
    output = []
    for conv in conversations:
        turns = []
        for turn in conv.turns:
            i = turn.index
            if args.method == "prefix":
                rewritten = prefix_rewrite(conv, i)
            elif args.method == "coref":
                clusters = clusters_by_topic.get(conv.topic_id)
                if clusters is None:
                    raise PipelineInputError(
                        f"topic {conv.topic_id}: no clusters supplied for coref rewrite"
                    )
                rewritten = coref_pronoun_rewrite(conv, i, clusters)
            elif args.method == "prefix_coref":
                clusters = clusters_by_topic.get(conv.topic_id)
                if clusters is None:
                    raise PipelineInputError(
                        f"topic {conv.topic_id}: no clusters supplied for coref rewrite"
                    )
                resolved = coref_pronoun_rewrite(conv, i, clusters)
                first = coref_pronoun_rewrite(conv, 1, clusters)
                rewritten = resolved if i == 1 else first.strip() + " " + resolved.strip()
            elif args.method == "t5":
                rewritten = rewrite_via_provider(build_t5_input(conv, i), provider)
                turn.rewritten_query = rewritten
            elif args.method == "union":
                turns.append({"index": i, "queries": union_plan(conv, i, "raw")})
                continue
            else:
                raise PipelineInputError(f"unknown rewrite method: {args.method!r}")
            turns.append({"index": i, "query": rewritten})
        output.append({"topic_id": conv.topic_id, "turns": turns})
    blob = json.dumps(output, indent=1)
    if args.out:
        Path(args.out).write_text(blob + "\n", encoding="utf-8")
        print(f"wrote rewrites for {len(output)} topics -> {args.out}")
    else:
        print(blob)
    return 0


def cmd_train(args) -> int:
    conversations = load_topics(args.topics)
    qrels = trec.read_qrels(args.qrels, args.scale)
    _, docstore = _load_index_and_docstore(args.index)
    if not docstore:
        raise PipelineInputError(f"{args.index}: index has no docstore with passage texts")
    provider = _build_embed_provider(args)
    training_set = train_mod.build_training_set(
        conversations, qrels, seed=args.seed, query_source=args.query_source
    )
    if not training_set:
        raise PipelineInputError("no training conversations could be sampled")
    config = train_mod.TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        patience=args.patience,
        hidden=args.hidden,
        seed=args.seed,
    )
    if args.cv:
        selection = train_mod.cross_validate(
            training_set, args.head, config, provider, docstore
        )
        chosen = selection["selected"]
        print(
            f"cross-validation selected batch_size={chosen['batch_size']} "
            f"learning_rate={chosen['learning_rate']}"
        )
        for row in selection["results"]:
            print(
                f"  batch_size={row['batch_size']} lr={row['learning_rate']} "
                f"mean_f1={row['mean_f1']:.4f}"
            )
        config = train_mod.TrainConfig(
            epochs=args.epochs,
            batch_size=chosen["batch_size"],
            learning_rate=chosen["learning_rate"],
            patience=args.patience,
            hidden=args.hidden,
            seed=args.seed,
        )
    params, history = train_mod.train_head(
        training_set, args.head, config, provider, docstore
    )
    save_head(params, args.out)
    history_path = Path(args.out).with_suffix(Path(args.out).suffix + ".history.jsonl")
    train_mod.save_history(history, history_path)
    figures.save_history_figure(history, str(history_path) + ".png")
    if args.export_json:
        export_head_json(params, args.export_json)
    print(
        f"trained {args.head} on {len(training_set)} conversations "
        f"({len(history)} epochs) -> {args.out}"
    )
    return 0


def cmd_run(args) -> int:
    conversations = load_topics(args.topics)
    index, docstore = _load_index_and_docstore(args.index)
    config = PipelineConfig(
        query_method=args.method,
        retrieval=_retrieval_config(args),
        tag=args.tag,
    )
    head = load_head(args.head_model) if args.head_model else None
    embed_provider = _build_embed_provider(args) if head is not None else None
    rewrite_provider = None
    if args.method in ("t5", "t5_union"):
        rewrite_provider = _build_rewrite_provider(args)
    clusters_by_topic = load_clusters(args.clusters) if args.clusters else None
    if head is not None and not docstore:
        raise PipelineInputError(f"{args.index}: index has no docstore with passage texts")

    result = run_benchmark(
        conversations,
        index,
        docstore,
        config,
        head=head,
        embed_provider=embed_provider,
        rewrite_provider=rewrite_provider,
        clusters_by_topic=clusters_by_topic,
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trec.write_run(result.run, out_dir / "run.txt", tag=args.tag)
    with open(out_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(benchmark_summary(result, config), fh, indent=1, sort_keys=True)
        fh.write("\n")
    _write_jsonl(result.attention_records(), out_dir / "attention.jsonl")
    _write_jsonl(result.embedding_records(), out_dir / "embeddings.jsonl")
    _write_jsonl(result.rewrite_records(), out_dir / "rewrites.jsonl")
    failed = result.failed_topics()
    print(
        f"ran {len(result.topics)} topics ({len(failed)} partial), "
        f"{len(result.run)} turns -> {out_dir}"
    )
    for topic in failed:
        print(f"  partial topic {topic.topic_id}: turn {topic.failed_turn}: {topic.error}")
    return 0


def _write_jsonl(records: list[dict], path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def cmd_evaluate(args) -> int:
    run = trec.read_run(args.run)
    qrels = trec.read_qrels(args.qrels, args.scale)
    report = evaluation.evaluate_run(
        run,
        qrels,
        ndcg_k=args.ndcg_k,
        recall_k=args.recall_k,
        threshold=args.threshold,
        gain=args.gain,
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    evaluation.write_report_json(report, out_dir / "report.json")
    evaluation.write_report_text(report, out_dir / "report.txt")
    metric = f"ndcg@{args.ndcg_k}"
    if report.per_turn:
        rows = evaluation.per_turn_breakdown(report.per_turn, metric)
        evaluation.write_breakdown_csv(rows, out_dir / "per_turn.csv")
        figures.save_breakdown_figure(rows, out_dir / "per_turn.png", metric)
    for name, value in sorted(report.means.items()):
        print(f"{name}: {value:.4f}")
    print(
        f"evaluated {report.evaluated_turns} turns "
        f"({report.unjudged_run_turns} unjudged in run, "
        f"{report.judged_missing_from_run} judged missing) -> {out_dir}"
    )
    return 0


def cmd_bleu(args) -> int:
    candidates = Path(args.candidates).read_text("utf-8").splitlines()
    references = Path(args.references).read_text("utf-8").splitlines()
    score = evaluation.bleu4(candidates, references)
    print(f"BLEU-4: {100.0 * score:.2f}")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump({"bleu4": score, "percent": 100.0 * score}, fh)
            fh.write("\n")
    return 0


def cmd_analyze_attention(args) -> int:
    records = [json.loads(line) for line in Path(args.logs).read_text("utf-8").splitlines() if line]
    if not records:
        raise PipelineInputError(f"{args.logs}: no attention records")
    table = evaluation.attention_by_depth(records)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    evaluation.write_attention_csv(table, out_dir / "attention.csv")
    figures.save_attention_figure(table, out_dir / "attention.png")
    print(f"aggregated attention for depths {sorted(table)} -> {out_dir}")
    return 0


def cmd_analyze_embeddings(args) -> int:
    records = [json.loads(line) for line in Path(args.logs).read_text("utf-8").splitlines() if line]
    if not records:
        raise PipelineInputError(f"{args.logs}: no embedding records")
    count = evaluation.export_embeddings_csv(records, args.out)
    print(f"exported {count} embeddings -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Parser.


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="convsearch",
        description="Conversational search: rewrite, retrieve, re-rank, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index", help="build an inverted index from a JSONL corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stemmer", default="porter", choices=("none", "porter", "kstem-like"))
    p.add_argument("--stopwords", default="default", help="'default', 'none', or a file")
    p.add_argument("--keep-case", action="store_true")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("search", help="query an index")
    p.add_argument("--index", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--turn-key", default="0_1")
    p.add_argument("--tag", default="convsearch")
    p.add_argument("--out", default=None)
    _add_retrieval_args(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("rewrite", help="rewrite conversational queries")
    p.add_argument("--topics", required=True)
    p.add_argument(
        "--method",
        required=True,
        choices=("prefix", "coref", "prefix_coref", "t5", "union"),
    )
    p.add_argument("--clusters", default=None)
    p.add_argument("--rewriter", default="echo", choices=("echo", "sidecar"))
    p.add_argument("--sidecar-url", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_rewrite)

    p = sub.add_parser("train", help="train a re-ranking head")
    p.add_argument("--topics", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--scale", required=True, choices=trec.QREL_SCALES)
    p.add_argument("--index", required=True)
    p.add_argument("--head", required=True, choices=HEAD_KINDS)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--patience", type=int, default=3)
    p.add_argument("--hidden", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cv", action="store_true", help="grid-select batch size and lr first")
    p.add_argument("--query-source", default="raw", choices=("raw", "manual", "auto"))
    p.add_argument("--export-json", default=None)
    _add_embed_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("run", help="run the full pipeline over topics")
    p.add_argument("--topics", required=True)
    p.add_argument("--index", required=True)
    p.add_argument(
        "--method",
        default="raw",
        choices=("raw", "manual", "auto", "prefix_coref", "t5", "t5_union"),
    )
    p.add_argument("--head-model", default=None, help="trained head model file")
    p.add_argument("--clusters", default=None)
    p.add_argument("--rewriter", default="sidecar", choices=("echo", "sidecar"))
    p.add_argument("--tag", default="convsearch")
    p.add_argument("--out-dir", required=True)
    _add_retrieval_args(p)
    _add_embed_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("evaluate", help="score a run file against qrels")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--scale", required=True, choices=trec.QREL_SCALES)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--ndcg-k", type=int, default=3)
    p.add_argument("--recall-k", type=int, default=1000)
    p.add_argument("--threshold", type=int, default=1)
    p.add_argument("--gain", default="exp", choices=("exp", "linear"))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bleu", help="corpus BLEU-4 of rewrites vs targets")
    p.add_argument("--candidates", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--json", default=None)
    p.set_defaults(func=cmd_bleu)

    p = sub.add_parser("analyze", help="post-run analysis")
    analyze_sub = p.add_subparsers(dest="analyze_command", required=True)

    pa = analyze_sub.add_parser("attention", help="aggregate attention by turn depth")
    pa.add_argument("--logs", required=True)
    pa.add_argument("--out-dir", required=True)
    pa.set_defaults(func=cmd_analyze_attention)

    pe = analyze_sub.add_parser("embeddings", help="export logged pair embeddings")
    pe.add_argument("--logs", required=True)
    pe.add_argument("--out", required=True)
    pe.set_defaults(func=cmd_analyze_embeddings)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (PipelineInputError, ValueError, KeyError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
