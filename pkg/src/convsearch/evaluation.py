"""Ranking metrics, BLEU for rewrites, and report files.

Metrics are macro-averaged over turns.  nDCG consumes raw graded
judgments (2^rel - 1 gains by default, linear as an option); AP, MRR and
recall binarize at a configurable grade threshold, grade >= 1 unless
told otherwise.  Turns present in the run but absent from the qrels are
excluded from the means and surfaced as a count.
"""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .retrieval import RankedList
from .trec import QrelSet, split_turn_key

_BLEU_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)

_GAINS = ("exp", "linear")


def _gain(grade: int, gain: str) -> float:
    if gain == "exp":
        return float(2**grade - 1)
    if gain == "linear":
        return float(grade)
    raise ValueError(f"unknown gain function: {gain!r}")


def ndcg_at_k(
    ranked_ids: list[str], grades: dict[str, int], k: int, gain: str = "exp"
) -> float:
    """Normalized DCG at k with log2(rank + 1) discounts.

    The ideal ranking uses the full judged pool, not just retrieved docs.
    Returns 0 when nothing judged relevant exists for the turn.
    """
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    dcg = 0.0
    for rank, doc_id in enumerate(ranked_ids[:k], start=1):
        dcg += _gain(grades.get(doc_id, 0), gain) / math.log2(rank + 1)
    ideal = sorted((_gain(g, gain) for g in grades.values()), reverse=True)[:k]
    idcg = sum(g / math.log2(rank + 1) for rank, g in enumerate(ideal, start=1))
    if idcg == 0.0:
        return 0.0
    return dcg / idcg


def average_precision(
    ranked_ids: list[str], grades: dict[str, int], threshold: int = 1
) -> float:
    """AP over the full ranking; the denominator counts all judged relevant."""
    relevant = {doc for doc, g in grades.items() if g >= threshold}
    if not relevant:
        return 0.0
    hits = 0
    total = 0.0
    for rank, doc_id in enumerate(ranked_ids, start=1):
        if doc_id in relevant:
            hits += 1
            total += hits / rank
    return total / len(relevant)


def reciprocal_rank(
    ranked_ids: list[str], grades: dict[str, int], threshold: int = 1
) -> float:
    for rank, doc_id in enumerate(ranked_ids, start=1):
        if grades.get(doc_id, 0) >= threshold:
            return 1.0 / rank
    return 0.0


def recall_at_k(
    ranked_ids: list[str], grades: dict[str, int], k: int, threshold: int = 1
) -> float:
    relevant = {doc for doc, g in grades.items() if g >= threshold}
    if not relevant:
        return 0.0
    found = sum(1 for doc_id in ranked_ids[:k] if doc_id in relevant)
    return found / len(relevant)


@dataclass
class MetricReport:
    """Macro-averaged metrics plus the per-turn values behind them."""

    means: dict[str, float] = field(default_factory=dict)
    per_turn: dict[str, dict[str, float]] = field(default_factory=dict)
    evaluated_turns: int = 0
    unjudged_run_turns: int = 0
    judged_missing_from_run: int = 0

    def to_dict(self) -> dict:
        return {
            "means": self.means,
            "evaluated_turns": self.evaluated_turns,
            "unjudged_run_turns": self.unjudged_run_turns,
            "judged_missing_from_run": self.judged_missing_from_run,
            "per_turn": self.per_turn,
        }


def evaluate_run(
    run: list[RankedList],
    qrels: QrelSet,
    ndcg_k: int = 3,
    recall_k: int = 1000,
    threshold: int = 1,
    gain: str = "exp",
) -> MetricReport:
    """Score a run against graded judgments, macro-averaging over turns."""
    if gain not in _GAINS:
        raise ValueError(f"unknown gain function: {gain!r}")
    report = MetricReport()
    seen = set()
    for ranked in run:
        key = ranked.turn_key
        seen.add(key)
        grades = qrels.grades.get(key)
        if not grades:
            report.unjudged_run_turns += 1
            continue
        ids = ranked.doc_ids()
        report.per_turn[key] = {
            f"ndcg@{ndcg_k}": ndcg_at_k(ids, grades, ndcg_k, gain),
            "ap": average_precision(ids, grades, threshold),
            "rr": reciprocal_rank(ids, grades, threshold),
            f"recall@{recall_k}": recall_at_k(ids, grades, recall_k, threshold),
        }
        report.evaluated_turns += 1
    report.judged_missing_from_run = sum(1 for key in qrels.grades if key not in seen)
    if report.per_turn:
        names = next(iter(report.per_turn.values())).keys()
        for name in names:
            values = [m[name] for m in report.per_turn.values()]
            out_name = {"ap": "map", "rr": "mrr"}.get(name, name)
            report.means[out_name] = float(np.mean(values))
    return report


# ---------------------------------------------------------------------------
# BLEU for rewrite quality.


def bleu_tokenize(text: str) -> list[str]:
    """Lowercase and split words from punctuation marks."""
    return _BLEU_TOKEN_RE.findall(text.lower())


def _ngram_counts(tokens: list[str], n: int) -> dict[tuple, int]:
    counts: dict[tuple, int] = {}
    for i in range(len(tokens) - n + 1):
        gram = tuple(tokens[i : i + n])
        counts[gram] = counts.get(gram, 0) + 1
    return counts


def bleu4(candidates: list[str], references: list[str]) -> float:
    """Corpus-level BLEU-4 with brevity penalty, on a 0-1 scale.

    Clipped n-gram precision counts pool over the whole corpus.  Orders
    with zero matches for n >= 2 get add-one smoothing; unigram precision
    is left unsmoothed so disjoint corpora score 0.
    """
    if len(candidates) != len(references):
        raise ValueError(
            f"{len(candidates)} candidates vs {len(references)} references"
        )
    if not candidates:
        raise ValueError("empty corpus")
    numerators = [0] * 5
    denominators = [0] * 5
    cand_len = 0
    ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_tokens = bleu_tokenize(cand)
        ref_tokens = bleu_tokenize(ref)
        cand_len += len(cand_tokens)
        ref_len += len(ref_tokens)
        for n in range(1, 5):
            cand_counts = _ngram_counts(cand_tokens, n)
            ref_counts = _ngram_counts(ref_tokens, n)
            for gram, count in cand_counts.items():
                numerators[n] += min(count, ref_counts.get(gram, 0))
            denominators[n] += max(0, len(cand_tokens) - n + 1)
    log_sum = 0.0
    for n in range(1, 5):
        num, den = numerators[n], denominators[n]
        if n >= 2 and num == 0:
            num, den = num + 1, den + 1
        if num == 0 or den == 0:
            return 0.0
        log_sum += math.log(num / den)
    precision_mean = math.exp(log_sum / 4.0)
    if cand_len == 0:
        return 0.0
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * precision_mean


# ---------------------------------------------------------------------------
# Depth breakdowns, attention, embedding export.


def per_turn_breakdown(
    per_turn: dict[str, dict[str, float]], metric: str
) -> list[dict]:
    """Macro-average one per-turn metric by turn depth.

    Returns rows {"turn": depth, "mean": value, "count": n} for depths that
    actually occur, sorted by depth.
    """
    buckets: dict[int, list[float]] = {}
    for key, metrics in per_turn.items():
        if metric not in metrics:
            raise ValueError(f"metric {metric!r} missing for turn {key}")
        _, depth = split_turn_key(key)
        buckets.setdefault(depth, []).append(metrics[metric])
    return [
        {"turn": depth, "mean": float(np.mean(vals)), "count": len(vals)}
        for depth, vals in sorted(buckets.items())
    ]


def attention_by_depth(records: list[dict]) -> dict[int, np.ndarray]:
    """Average attention over memories, grouped by turn depth.

    Records look like {"topic": ..., "turn": t, "attention": [...]} where the
    vector has t - 1 entries (one per stored memory).  Each returned row is a
    mean of rows on the probability simplex, so it sums to 1.
    """
    buckets: dict[int, list[np.ndarray]] = {}
    for record in records:
        depth = int(record["turn"])
        vec = np.asarray(record["attention"], dtype=np.float64)
        if vec.shape != (depth - 1,):
            raise ValueError(
                f"turn {depth} attention has shape {vec.shape}, expected ({depth - 1},)"
            )
        buckets.setdefault(depth, []).append(vec)
    return {
        depth: np.mean(np.stack(vecs), axis=0) for depth, vecs in sorted(buckets.items())
    }


def export_embeddings_csv(records: list[dict], path: str | Path) -> int:
    """Write logged pair embeddings as a flat table for offline analysis."""
    records = list(records)
    if not records:
        raise ValueError("no embedding records to export")
    dim = len(records[0]["vector"])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["topic", "turn"] + [f"v{i}" for i in range(dim)])
        for record in records:
            vec = record["vector"]
            if len(vec) != dim:
                raise ValueError("embedding records have inconsistent dimensions")
            writer.writerow(
                [record["topic"], record["turn"]] + [repr(float(v)) for v in vec]
            )
    return len(records)


# ---------------------------------------------------------------------------
# Report files.


def write_report_json(report: MetricReport, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_report_text(report: MetricReport, path: str | Path) -> None:
    """Aligned two-column summary of the macro means."""
    rows = [("turns evaluated", str(report.evaluated_turns))]
    rows += [("run turns without qrels", str(report.unjudged_run_turns))]
    rows += [("judged turns missing from run", str(report.judged_missing_from_run))]
    rows += [(name, f"{value:.4f}") for name, value in sorted(report.means.items())]
    width = max(len(name) for name, _ in rows)
    with open(path, "w", encoding="utf-8") as fh:
        for name, value in rows:
            fh.write(f"{name.ljust(width)}  {value}\n")


def write_breakdown_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["turn", "mean", "count"])
        for row in rows:
            writer.writerow([row["turn"], repr(float(row["mean"])), row["count"]])


def write_attention_csv(table: dict[int, np.ndarray], path: str | Path) -> None:
    """Long-format table: one row per (turn depth, memory index)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["turn", "memory", "mean_attention"])
        for depth in sorted(table):
            for mem_index, value in enumerate(table[depth], start=1):
                writer.writerow([depth, mem_index, repr(float(value))])
