"""Conversational search: query rewriting, lexical retrieval, neural re-ranking."""

from .corpus import (
    AnalysisConfig,
    InvertedIndex,
    PassageDoc,
    build_index,
    default_stopwords,
    kstem_like_stem,
    load_docstore,
    load_index,
    porter_stem,
    read_corpus,
    save_docstore,
    save_index,
    tokenize,
)
from .embed import (
    CachedEmbeddingProvider,
    DictEmbeddingProvider,
    EmbedTransportError,
    EmbeddingCache,
    EmbeddingDimensionError,
    EmbeddingKey,
    EmbeddingVector,
    SidecarEmbeddingProvider,
    SyntheticEmbeddingProvider,
    TopicalSyntheticProvider,
    embed_batch,
    embed_pair,
    synthetic_embed,
)
from .evaluation import (
    MetricReport,
    attention_by_depth,
    average_precision,
    bleu4,
    evaluate_run,
    ndcg_at_k,
    per_turn_breakdown,
    recall_at_k,
    reciprocal_rank,
)
from .pipeline import (
    BenchmarkResult,
    PipelineConfig,
    PipelineInputError,
    TopicResult,
    benchmark_summary,
    run_benchmark,
    run_conversation,
)
from .rerank import (
    HEAD_KINDS,
    ConversationState,
    HeadParams,
    conversation_forward_backward,
    init_head,
    init_state,
    load_head,
    rerank_turn,
    save_head,
    score_pair,
)
from .retrieval import RankedList, RetrievalConfig, search
from .rewrite import (
    Conversation,
    CorefClusters,
    EchoRewriteProvider,
    Mention,
    RewriteTransportError,
    SidecarRewriteProvider,
    Turn,
    build_t5_input,
    coref_pronoun_rewrite,
    fuse_union,
    load_clusters,
    load_topics,
    prefix_rewrite,
    rewrite_via_provider,
    union_plan,
)
from .train import (
    TrainConfig,
    TrainingConversation,
    TrainingTurn,
    build_training_set,
    cross_validate,
    sample_conversations,
    split_topics,
    train_head,
)
from .trec import QrelSet, binarize, read_qrels, read_run, split_turn_key, turn_key, write_qrels, write_run

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
