"""Training protocol for the re-ranking heads.

Judged passages are assembled into synthetic training conversations: for a
topic whose first turn has X judged passages, X conversations are sampled,
each drawing one judged passage per turn without replacement (pools
reshuffle and are reused once exhausted).  A whole conversation is the
training example; batches group conversations, and the state threads
through the sampled passage of each turn.

Model selection runs five seeded 75/25 topic-disjoint splits per grid
point and keeps the configuration with the highest mean validation F1.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .embed import EmbeddingKey, EmbeddingProvider
from .rerank import (
    HeadParams,
    conversation_forward_backward,
    copy_params,
    init_head,
    zero_grads,
)
from .trec import QrelSet, binarize, turn_key

log = logging.getLogger("convsearch.train")

DEFAULT_GRID = [
    {"batch_size": b, "learning_rate": lr}
    for b in (1, 2, 4)
    for lr in (0.001, 0.0001)
]

_CLAMP = 1e-12


@dataclass
class TrainingTurn:
    turn_index: int
    query: str
    doc_id: str
    label: int


@dataclass
class TrainingConversation:
    topic_id: str
    turns: list[TrainingTurn] = field(default_factory=list)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 2
    learning_rate: float = 0.001
    patience: int = 3
    threshold: float = 0.5
    hidden: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("decision threshold must be in (0, 1)")


# ---------------------------------------------------------------------------
# Loss, F1, Adam.


def loss(scores, labels) -> float:
    """Summed cross entropy: -sum_pos log s - sum_neg log(1 - s).

    Scores are clamped to [1e-12, 1 - 1e-12] before the log.
    """
    scores = np.clip(np.asarray(scores, dtype=np.float64), _CLAMP, 1.0 - _CLAMP)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape:
        raise ValueError(f"scores shape {scores.shape} != labels shape {labels.shape}")
    return float(-np.sum(labels * np.log(scores) + (1.0 - labels) * np.log(1.0 - scores)))


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    """F1 = 2PR / (P + R), defined as 0 when precision + recall is 0."""
    if tp + fp == 0 or tp + fn == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def f1_at_threshold(scores, labels, threshold: float = 0.5) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    preds = scores >= threshold
    pos = labels > 0.5
    tp = int(np.sum(preds & pos))
    fp = int(np.sum(preds & ~pos))
    fn = int(np.sum(~preds & pos))
    return f1_from_counts(tp, fp, fn)


def adam_init(params: HeadParams) -> dict:
    return {
        "m": zero_grads(params),
        "v": zero_grads(params),
        "step": 0,
    }


def adam_step(
    params: HeadParams,
    grads: dict[str, np.ndarray],
    state: dict,
    learning_rate: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place on the parameter arrays."""
    state["step"] += 1
    t = state["step"]
    for name, grad in grads.items():
        m = state["m"][name]
        v = state["v"][name]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        params.arrays[name] -= learning_rate * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# Conversation sampling.


def sample_conversations(
    conv,
    binary_qrels: dict[str, dict[str, int]],
    seed: int = 0,
    query_source: str = "raw",
) -> list[TrainingConversation]:
    """Build training conversations for one topic from binary judgments.

    The number of conversations equals the judged-passage count of turn 1.
    Per turn, passages are drawn without replacement from a seeded shuffle
    of the judged pool; once a pool runs out it is reshuffled and reused.
    Turns with no judged passages are dropped (logged once per topic) and
    the output is independent of the qrels' input ordering.
    """
    rng = np.random.default_rng(seed)
    pools: dict[int, list[tuple[str, int]]] = {}
    dropped = []
    for turn in conv.turns:
        key = turn_key(conv.topic_id, turn.index)
        judged = binary_qrels.get(key, {})
        if not judged:
            dropped.append(turn.index)
            continue
        pools[turn.index] = sorted(judged.items())
    if dropped:
        log.warning(
            "topic %s: dropping unjudged turns %s from sampled conversations",
            conv.topic_id,
            dropped,
        )
    first_pool = pools.get(1)
    if not first_pool:
        log.warning("topic %s: turn 1 has no judged passages, skipping topic", conv.topic_id)
        return []
    count = len(first_pool)

    def query_for(turn) -> str:
        if query_source == "raw":
            return turn.raw_query
        if query_source == "manual":
            if turn.manual_query is None:
                raise ValueError(f"topic {conv.topic_id}: turn {turn.index} has no manual query")
            return turn.manual_query
        if query_source == "auto":
            if turn.auto_query is None:
                raise ValueError(f"topic {conv.topic_id}: turn {turn.index} has no auto query")
            return turn.auto_query
        raise ValueError(f"unknown query source: {query_source!r}")

    draws: dict[int, list[tuple[str, int]]] = {}
    for index in sorted(pools):
        pool = pools[index]
        order: list[tuple[str, int]] = []
        while len(order) < count:
            shuffled = [pool[i] for i in rng.permutation(len(pool))]
            order.extend(shuffled)
        draws[index] = order[:count]

    conversations = []
    for j in range(count):
        turns = [
            TrainingTurn(
                turn_index=turn.index,
                query=query_for(turn),
                doc_id=draws[turn.index][j][0],
                label=draws[turn.index][j][1],
            )
            for turn in conv.turns
            if turn.index in pools
        ]
        conversations.append(TrainingConversation(topic_id=conv.topic_id, turns=turns))
    return conversations


def build_training_set(
    conversations,
    qrels: QrelSet,
    seed: int = 0,
    query_source: str = "raw",
) -> list[TrainingConversation]:
    """Sample training conversations for every topic against binarized qrels."""
    binary = binarize(qrels)
    out: list[TrainingConversation] = []
    for conv in conversations:
        out.extend(sample_conversations(conv, binary, seed=seed, query_source=query_source))
    return out


# ---------------------------------------------------------------------------
# Embedding assembly and training.


def conversation_embeddings(
    tc: TrainingConversation,
    provider: EmbeddingProvider,
    passage_texts: dict[str, str],
) -> tuple[np.ndarray, np.ndarray]:
    vecs = []
    labels = []
    for turn in tc.turns:
        try:
            text = passage_texts[turn.doc_id]
        except KeyError:
            raise KeyError(
                f"topic {tc.topic_id}: no passage text for doc {turn.doc_id!r}"
            ) from None
        vecs.append(
            np.asarray(
                provider.embed_pair(EmbeddingKey(turn.query, text)), dtype=np.float64
            )
        )
        labels.append(turn.label)
    return np.stack(vecs), np.asarray(labels, dtype=np.float64)


def _check_finite(grads: dict[str, np.ndarray], context: str) -> None:
    bad = [name for name, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        norms = {name: float(np.max(np.abs(grads[name]))) for name in grads}
        raise RuntimeError(
            f"non-finite gradient during {context}; offending arrays: {bad}; "
            f"max-abs per array: {norms}"
        )


def _scores_for(params, material) -> tuple[np.ndarray, np.ndarray]:
    all_scores = []
    all_labels = []
    for embs, labels in material:
        result = conversation_forward_backward(params, embs, labels)
        all_scores.append(result["scores"])
        all_labels.append(labels)
    return np.concatenate(all_scores), np.concatenate(all_labels)


def train_head(
    conversations: list[TrainingConversation],
    kind: str,
    config: TrainConfig,
    provider: EmbeddingProvider,
    passage_texts: dict[str, str],
    val_conversations: list[TrainingConversation] | None = None,
    checkpoint_path: str | Path | None = None,
) -> tuple[HeadParams, list[dict]]:
    """Train one head; returns the parameters and a per-epoch history.

    With a validation set, early stopping watches validation F1 with the
    configured patience and the best-scoring epoch's parameters are kept.
    Gradients are checked for finiteness every step; a non-finite value
    aborts with diagnostics rather than continuing silently.  When a
    checkpoint path is set, an abort mid-training writes the last
    parameters and history there before re-raising, so a long run can be
    inspected or resumed.
    """
    if not conversations:
        raise ValueError("no training conversations")
    material = [
        conversation_embeddings(tc, provider, passage_texts) for tc in conversations
    ]
    val_material = None
    if val_conversations is not None:
        val_material = [
            conversation_embeddings(tc, provider, passage_texts)
            for tc in val_conversations
        ]

    params = init_head(kind, emb_dim=provider.dim, hidden=config.hidden, seed=config.seed)
    opt = adam_init(params)
    rng = np.random.default_rng(config.seed)

    history: list[dict] = []
    best_f1 = -1.0
    best_params = None
    best_epoch = -1
    stale = 0

    try:
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(material))
            total_loss = 0.0
            for start in range(0, len(order), config.batch_size):
                batch = order[start : start + config.batch_size]
                grads = zero_grads(params)
                for idx in batch:
                    embs, labels = material[idx]
                    result = conversation_forward_backward(params, embs, labels)
                    total_loss += result["loss"]
                    for name in grads:
                        grads[name] += result["grads"][name]
                _check_finite(grads, f"{kind} epoch {epoch} batch at {start}")
                adam_step(params, grads, opt, config.learning_rate)

            record = {"epoch": epoch, "loss": total_loss}
            if val_material is not None:
                scores, labels = _scores_for(params, val_material)
                val_f1 = f1_at_threshold(scores, labels, config.threshold)
                record["val_f1"] = val_f1
                if val_f1 > best_f1:
                    best_f1 = val_f1
                    best_params = copy_params(params)
                    best_epoch = epoch
                    stale = 0
                else:
                    stale += 1
            history.append(record)
            if val_material is not None and stale >= config.patience:
                break
    except Exception:
        if checkpoint_path is not None:
            from .rerank import save_head

            params.meta = {"kind": kind, "aborted_after_epochs": len(history)}
            save_head(params, checkpoint_path)
            save_history(history, str(checkpoint_path) + ".history.jsonl")
            log.error("training aborted; checkpoint written to %s", checkpoint_path)
        raise

    if best_params is not None:
        params = best_params
    params.meta = {
        "kind": kind,
        "epochs_run": len(history),
        "best_epoch": best_epoch if best_epoch > 0 else len(history),
        "best_val_f1": best_f1 if best_f1 >= 0 else None,
        "batch_size": config.batch_size,
        "learning_rate": config.learning_rate,
        "seed": config.seed,
    }
    return params, history


def evaluate_f1(
    params: HeadParams,
    conversations: list[TrainingConversation],
    provider: EmbeddingProvider,
    passage_texts: dict[str, str],
    threshold: float = 0.5,
) -> float:
    material = [
        conversation_embeddings(tc, provider, passage_texts) for tc in conversations
    ]
    scores, labels = _scores_for(params, material)
    return f1_at_threshold(scores, labels, threshold)


def save_history(history: list[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in history:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Cross-validation.


def split_topics(topic_ids: list[str], seed: int, train_frac: float = 0.75):
    """One seeded topic-disjoint split; returns (train_ids, val_ids)."""
    unique = sorted(set(topic_ids))
    rng = np.random.default_rng(seed)
    order = [unique[i] for i in rng.permutation(len(unique))]
    n_train = int(round(train_frac * len(unique)))
    n_train = min(max(n_train, 1), len(unique) - 1)
    return sorted(order[:n_train]), sorted(order[n_train:])


def cross_validate(
    conversations: list[TrainingConversation],
    kind: str,
    config: TrainConfig,
    provider: EmbeddingProvider,
    passage_texts: dict[str, str],
    grid: list[dict] | None = None,
    folds: int = 5,
) -> dict:
    """Grid selection over repeated seeded topic-disjoint 75/25 splits.

    Every grid point is trained on each fold's training topics and scored
    by validation F1; the point with the highest mean wins, ties keeping
    the earliest grid entry.
    """
    if grid is None:
        grid = DEFAULT_GRID
    topic_ids = sorted({tc.topic_id for tc in conversations})
    if len(topic_ids) < 5:
        raise ValueError(f"cross-validation needs at least 5 topics, got {len(topic_ids)}")
    by_topic: dict[str, list[TrainingConversation]] = {}
    for tc in conversations:
        by_topic.setdefault(tc.topic_id, []).append(tc)

    splits = []
    for fold in range(folds):
        train_ids, val_ids = split_topics(topic_ids, seed=config.seed + fold)
        splits.append((train_ids, val_ids))

    results = []
    for point in grid:
        fold_f1 = []
        for fold, (train_ids, val_ids) in enumerate(splits):
            fold_config = replace(
                config,
                batch_size=point["batch_size"],
                learning_rate=point["learning_rate"],
            )
            train_convs = [tc for t in train_ids for tc in by_topic[t]]
            val_convs = [tc for t in val_ids for tc in by_topic[t]]
            params, _ = train_head(
                train_convs, kind, fold_config, provider, passage_texts,
                val_conversations=val_convs,
            )
            fold_f1.append(
                evaluate_f1(params, val_convs, provider, passage_texts, config.threshold)
            )
        results.append(
            {
                "batch_size": point["batch_size"],
                "learning_rate": point["learning_rate"],
                "fold_f1": fold_f1,
                "mean_f1": float(np.mean(fold_f1)) if fold_f1 else math.nan,
            }
        )

    best = max(range(len(results)), key=lambda i: (results[i]["mean_f1"], -i))
    return {
        "selected": {
            "batch_size": results[best]["batch_size"],
            "learning_rate": results[best]["learning_rate"],
        },
        "results": results,
        "splits": [
            {"train_topics": train_ids, "val_topics": val_ids}
            for train_ids, val_ids in splits
        ],
    }
