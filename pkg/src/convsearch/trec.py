"""TREC-style run and qrels files.

A run line is `turn_key Q0 doc_id rank score tag`; a qrels line is
`turn_key Q0 doc_id grade`.  Turn keys are "topicid_turnindex" with the
turn index after the last underscore.  Scores are written with repr so a
write/read cycle is bit-faithful.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .retrieval import RankedList

QREL_SCALES = ("zero_two", "zero_four")

_SCALE_MAX = {"zero_two": 2, "zero_four": 4}
_SCALE_RELEVANT = {"zero_two": (1, 2), "zero_four": (3, 4)}


def turn_key(topic_id: str, turn_index: int) -> str:
    return f"{topic_id}_{turn_index}"


def split_turn_key(key: str) -> tuple[str, int]:
    """Split "topicid_turnindex" on the last underscore."""
    topic, sep, turn = key.rpartition("_")
    if not sep or not turn.isdigit():
        raise ValueError(f"malformed turn key: {key!r}")
    return topic, int(turn)


def write_run(ranked_lists: list[RankedList], path: str | Path, tag: str = "convsearch") -> None:
    """Write ranked lists in TREC run format, ranks starting at 1."""
    with open(path, "w", encoding="utf-8") as fh:
        for ranked in ranked_lists:
            for rank, (doc_id, score) in enumerate(ranked.entries, start=1):
                fh.write(f"{ranked.turn_key} Q0 {doc_id} {rank} {score!r} {tag}\n")


def read_run(path: str | Path) -> list[RankedList]:
    """Read a TREC run file back into per-turn ranked lists.

    Lines for one turn must be contiguous and rank-consistent; a malformed
    line raises with its line number.
    """
    lists: list[RankedList] = []
    current: RankedList | None = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 6 or parts[1] != "Q0":
                raise ValueError(f"{path}: malformed run line {lineno}: {line!r}")
            key, _, doc_id, rank_str, score_str, _tag = parts
            try:
                rank = int(rank_str)
                score = float(score_str)
            except ValueError as exc:
                raise ValueError(f"{path}: malformed run line {lineno}: {exc}") from exc
            if current is None or current.turn_key != key:
                current = RankedList(key)
                lists.append(current)
            if rank != len(current.entries) + 1:
                raise ValueError(
                    f"{path}: run line {lineno}: rank {rank} does not match "
                    f"position {len(current.entries) + 1} for turn {key}"
                )
            current.entries.append((doc_id, score))
    return lists


@dataclass
class QrelSet:
    """Graded judgments keyed by turn, on a declared grade scale."""

    scale: str
    grades: dict[str, dict[str, int]] = field(default_factory=dict)

    def __post_init__(self):
        if self.scale not in QREL_SCALES:
            raise ValueError(f"unknown qrels scale: {self.scale!r}")

    def grade(self, key: str, doc_id: str) -> int:
        return self.grades.get(key, {}).get(doc_id, 0)

    def judged_turn_keys(self) -> list[str]:
        return sorted(self.grades)


def read_qrels(path: str | Path, scale: str) -> QrelSet:
    qrels = QrelSet(scale=scale)
    top = _SCALE_MAX[scale]
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ValueError(f"{path}: malformed qrels line {lineno}: {line!r}")
            key, _, doc_id, grade_str = parts
            try:
                grade = int(grade_str)
            except ValueError as exc:
                raise ValueError(f"{path}: malformed qrels line {lineno}: {exc}") from exc
            if not 0 <= grade <= top:
                raise ValueError(
                    f"{path}: qrels line {lineno}: grade {grade} outside scale {scale}"
                )
            qrels.grades.setdefault(key, {})[doc_id] = grade
    return qrels


def write_qrels(qrels: QrelSet, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(qrels.grades):
            for doc_id in sorted(qrels.grades[key]):
                fh.write(f"{key} Q0 {doc_id} {qrels.grades[key][doc_id]}\n")


def binarize(qrels: QrelSet) -> dict[str, dict[str, int]]:
    """Collapse graded judgments to binary labels.

    On the 0-2 scale grades 1 and 2 are relevant; on the 0-4 scale only
    grades 3 and 4 are.
    """
    relevant = _SCALE_RELEVANT[qrels.scale]
    return {
        key: {doc: 1 if grade in relevant else 0 for doc, grade in docs.items()}
        for key, docs in qrels.grades.items()
    }
