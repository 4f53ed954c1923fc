"""Passage corpus handling: tokenization, analysis, and the inverted index.

The index is built once from a document stream and is read-only afterwards;
concurrent readers need no locking.  Postings are kept per term as lists of
(doc_id, term_frequency) sorted by doc id so that candidate generation can
walk them term-at-a-time.
"""

from __future__ import annotations

import gzip
import json
import re
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)

_STEMMERS = ("none", "porter", "kstem-like")

_INDEX_MAGIC = b"CSIX"
_INDEX_VERSION = 1


def _load_wordlist(name: str) -> frozenset[str]:
    text = resources.files("convsearch.data").joinpath(name).read_text("utf-8")
    words = [w.strip() for w in text.splitlines()]
    return frozenset(w for w in words if w and not w.startswith("#"))


def default_stopwords() -> frozenset[str]:
    """The bundled English stopword list (Lucene's 33-word default)."""
    return _load_wordlist("stopwords_en.txt")


# ---------------------------------------------------------------------------
# Porter stemmer (original 1980 algorithm).


def _is_cons(word: str, i: int) -> bool:
    ch = word[i]
    if ch in "aeiou":
        return False
    if ch == "y":
        # y is a vowel when preceded by a consonant
        return True if i == 0 else not _is_cons(word, i - 1)
    return True


def _measure(stem: str) -> int:
    """Number of VC sequences in [C](VC)^m[V]."""
    m = 0
    prev_vowel = False
    for i in range(len(stem)):
        if _is_cons(stem, i):
            if prev_vowel:
                m += 1
            prev_vowel = False
        else:
            prev_vowel = True
    return m


def _has_vowel(stem: str) -> bool:
    return any(not _is_cons(stem, i) for i in range(len(stem)))


def _ends_double_cons(word: str) -> bool:
    return len(word) >= 2 and word[-1] == word[-2] and _is_cons(word, len(word) - 1)


def _ends_cvc(word: str) -> bool:
    if len(word) < 3:
        return False
    return (
        _is_cons(word, len(word) - 3)
        and not _is_cons(word, len(word) - 2)
        and _is_cons(word, len(word) - 1)
        and word[-1] not in "wxy"
    )


_STEP2 = [
    ("ational", "ate"), ("tional", "tion"), ("enci", "ence"), ("anci", "ance"),
    ("izer", "ize"), ("abli", "able"), ("alli", "al"), ("entli", "ent"),
    ("eli", "e"), ("ousli", "ous"), ("ization", "ize"), ("ation", "ate"),
    ("ator", "ate"), ("alism", "al"), ("iveness", "ive"), ("fulness", "ful"),
    ("ousness", "ous"), ("aliti", "al"), ("iviti", "ive"), ("biliti", "ble"),
]

_STEP3 = [
    ("icate", "ic"), ("ative", ""), ("alize", "al"), ("iciti", "ic"),
    ("ical", "ic"), ("ful", ""), ("ness", ""),
]

# longest suffixes first so e.g. "ement" wins over "ment" over "ent"
_STEP4 = [
    "ement", "ance", "ence", "able", "ible", "ment", "ant", "ent", "ion",
    "ism", "ate", "iti", "ous", "ive", "ize", "al", "er", "ic", "ou",
]


def porter_stem(word: str) -> str:
    """Stem one lowercase token with the original Porter algorithm."""
    if len(word) <= 2:
        return word

    # step 1a
    if word.endswith("sses"):
        word = word[:-2]
    elif word.endswith("ies"):
        word = word[:-2]
    elif word.endswith("ss"):
        pass
    elif word.endswith("s"):
        word = word[:-1]

    # step 1b
    stripped = False
    if word.endswith("eed"):
        if _measure(word[:-3]) > 0:
            word = word[:-1]
    elif word.endswith("ed") and _has_vowel(word[:-2]):
        word = word[:-2]
        stripped = True
    elif word.endswith("ing") and _has_vowel(word[:-3]):
        word = word[:-3]
        stripped = True
    if stripped:
        if word.endswith(("at", "bl", "iz")):
            word += "e"
        elif _ends_double_cons(word) and word[-1] not in "lsz":
            word = word[:-1]
        elif _measure(word) == 1 and _ends_cvc(word):
            word += "e"

    # step 1c
    if word.endswith("y") and _has_vowel(word[:-1]):
        word = word[:-1] + "i"

    # step 2
    for suffix, repl in _STEP2:
        if word.endswith(suffix):
            stem = word[: -len(suffix)]
            if _measure(stem) > 0:
                word = stem + repl
            break

    # step 3
    for suffix, repl in _STEP3:
        if word.endswith(suffix):
            stem = word[: -len(suffix)]
            if _measure(stem) > 0:
                word = stem + repl
            break

    # step 4
    for suffix in _STEP4:
        if word.endswith(suffix):
            stem = word[: -len(suffix)]
            if _measure(stem) > 1:
                if suffix == "ion" and not stem.endswith(("s", "t")):
                    break
                word = stem
            break

    # step 5a
    if word.endswith("e"):
        stem = word[:-1]
        m = _measure(stem)
        if m > 1 or (m == 1 and not _ends_cvc(stem)):
            word = stem

    # step 5b
    if _measure(word) > 1 and _ends_double_cons(word) and word.endswith("l"):
        word = word[:-1]

    return word


def kstem_like_stem(word: str) -> str:
    """Best-effort inflectional reduction in the spirit of KStem.

    The real KStem consults a large lexicon; without one, this only undoes
    plural and possessive inflection and leaves everything else alone.
    """
    if word.endswith("'s"):
        word = word[:-2]
    if len(word) <= 3:
        return word
    if word.endswith("ies") and len(word) > 4:
        return word[:-3] + "y"
    if word.endswith("es") and word[:-2].endswith(("s", "x", "z", "ch", "sh")):
        return word[:-2]
    if word.endswith("s") and not word.endswith(("ss", "us", "is")):
        return word[:-1]
    return word


def _stem_fn(name: str):
    if name == "none":
        return lambda w: w
    if name == "porter":
        return porter_stem
    if name == "kstem-like":
        return kstem_like_stem
    raise ValueError(f"unknown stemmer: {name!r} (expected one of {_STEMMERS})")


# ---------------------------------------------------------------------------
# Analysis and documents.


@dataclass(frozen=True)
class AnalysisConfig:
    """Text analysis settings shared by indexing and query processing."""

    stemmer: str = "porter"
    stopwords: frozenset[str] = field(default_factory=default_stopwords)
    lowercase: bool = True

    def __post_init__(self):
        if self.stemmer not in _STEMMERS:
            raise ValueError(
                f"unknown stemmer: {self.stemmer!r} (expected one of {_STEMMERS})"
            )
        object.__setattr__(self, "stopwords", frozenset(self.stopwords))


@dataclass(frozen=True)
class PassageDoc:
    id: str
    text: str


def tokenize(text: str, config: AnalysisConfig) -> list[str]:
    """Split on Unicode whitespace/punctuation, then filter stopwords and stem.

    Token order is preserved.  Stopword removal happens before stemming, so
    the stopword list is matched against surface (lowercased) forms.
    """
    if config.lowercase:
        text = text.lower()
    tokens = _TOKEN_RE.findall(text)
    if config.stopwords:
        tokens = [t for t in tokens if t not in config.stopwords]
    stem = _stem_fn(config.stemmer)
    if config.stemmer != "none":
        tokens = [stem(t) for t in tokens]
    return tokens


# ---------------------------------------------------------------------------
# Inverted index.


class InvertedIndex:
    """Read-only term index over a passage corpus.

    Do not mutate the structures after construction; `build_index` is the
    only supported way to create one.
    """

    def __init__(
        self,
        postings: dict[str, list[tuple[str, int]]],
        doc_lengths: dict[str, int],
        collection_freq: dict[str, int],
        total_tokens: int,
        config: AnalysisConfig,
    ):
        self.postings = postings
        self.doc_lengths = doc_lengths
        self.collection_freq = collection_freq
        self.total_tokens = total_tokens
        self.config = config

    @property
    def doc_count(self) -> int:
        return len(self.doc_lengths)

    @property
    def vocabulary_size(self) -> int:
        return len(self.postings)

    @property
    def avg_doc_length(self) -> float:
        if not self.doc_lengths:
            return 0.0
        return self.total_tokens / len(self.doc_lengths)

    def postings_for(self, term: str) -> list[tuple[str, int]]:
        return self.postings.get(term, [])

    def df(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def cf(self, term: str) -> int:
        return self.collection_freq.get(term, 0)

    def term_frequency(self, term: str, doc_id: str) -> int:
        for doc, tf in self.postings.get(term, ()):
            if doc == doc_id:
                return tf
        return 0


def build_index(docs: Iterable[PassageDoc], config: AnalysisConfig) -> InvertedIndex:
    """Build an inverted index from a document stream.

    Consumes the stream once; the result does not depend on document order.
    Raises ValueError naming the offending id if a duplicate appears.
    """
    per_term: dict[str, dict[str, int]] = {}
    doc_lengths: dict[str, int] = {}
    total_tokens = 0
    for doc in docs:
        if doc.id in doc_lengths:
            raise ValueError(f"duplicate document id: {doc.id!r}")
        tokens = tokenize(doc.text, config)
        doc_lengths[doc.id] = len(tokens)
        total_tokens += len(tokens)
        for term in tokens:
            bucket = per_term.setdefault(term, {})
            bucket[doc.id] = bucket.get(doc.id, 0) + 1
    postings = {
        term: sorted(bucket.items()) for term, bucket in sorted(per_term.items())
    }
    collection_freq = {
        term: sum(tf for _, tf in plist) for term, plist in postings.items()
    }
    return InvertedIndex(postings, doc_lengths, collection_freq, total_tokens, config)


# ---------------------------------------------------------------------------
# Corpus and docstore files.


def read_corpus(path: str | Path) -> Iterator[PassageDoc]:
    """Read a JSONL corpus of {"id": ..., "text": ...} records."""
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rt", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                doc = PassageDoc(id=str(record["id"]), text=str(record["text"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}: malformed corpus line {lineno}: {exc}") from exc
            yield doc


def save_index(index: InvertedIndex, path: str | Path) -> None:
    """Persist an index to a directory (binary manifest + gzipped tables)."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    config_blob = json.dumps(
        {
            "stemmer": index.config.stemmer,
            "lowercase": index.config.lowercase,
            "stopwords": sorted(index.config.stopwords),
        },
        sort_keys=True,
    ).encode("utf-8")
    with open(out / "manifest.bin", "wb") as fh:
        fh.write(_INDEX_MAGIC)
        fh.write(struct.pack("<B", _INDEX_VERSION))
        fh.write(struct.pack("<QQ", index.doc_count, index.total_tokens))
        fh.write(struct.pack("<I", len(config_blob)))
        fh.write(config_blob)
    tables = {
        "postings": {t: [[d, tf] for d, tf in pl] for t, pl in index.postings.items()},
        "doc_lengths": index.doc_lengths,
        "collection_freq": index.collection_freq,
    }
    with gzip.open(out / "tables.json.gz", "wt", encoding="utf-8") as fh:
        json.dump(tables, fh, sort_keys=True)


def load_index(path: str | Path) -> InvertedIndex:
    src = Path(path)
    with open(src / "manifest.bin", "rb") as fh:
        magic = fh.read(4)
        if magic != _INDEX_MAGIC:
            raise ValueError(f"{src}: not an index directory (bad magic)")
        (version,) = struct.unpack("<B", fh.read(1))
        if version != _INDEX_VERSION:
            raise ValueError(
                f"{src}: unsupported index format version {version} "
                f"(this build reads version {_INDEX_VERSION})"
            )
        doc_count, total_tokens = struct.unpack("<QQ", fh.read(16))
        (blob_len,) = struct.unpack("<I", fh.read(4))
        config_raw = json.loads(fh.read(blob_len).decode("utf-8"))
    config = AnalysisConfig(
        stemmer=config_raw["stemmer"],
        stopwords=frozenset(config_raw["stopwords"]),
        lowercase=config_raw["lowercase"],
    )
    with gzip.open(src / "tables.json.gz", "rt", encoding="utf-8") as fh:
        tables = json.load(fh)
    postings = {
        t: [(d, int(tf)) for d, tf in pl] for t, pl in tables["postings"].items()
    }
    index = InvertedIndex(
        postings=postings,
        doc_lengths={d: int(n) for d, n in tables["doc_lengths"].items()},
        collection_freq={t: int(n) for t, n in tables["collection_freq"].items()},
        total_tokens=total_tokens,
        config=config,
    )
    if index.doc_count != doc_count:
        raise ValueError(f"{src}: manifest doc count disagrees with tables")
    return index


def save_docstore(docs: Iterable[PassageDoc], path: str | Path) -> None:
    """Write passage texts alongside an index so pairs can be re-embedded."""
    with gzip.open(path, "wt", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(json.dumps({"id": doc.id, "text": doc.text}) + "\n")


def load_docstore(path: str | Path) -> dict[str, str]:
    store: dict[str, str] = {}
    with gzip.open(path, "rt", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                record = json.loads(line)
                store[record["id"]] = record["text"]
    return store
