"""Query-passage pair embeddings.

Re-ranking consumes one fixed-size vector per (query, passage) pair.  In a
full deployment that vector comes from a relevance-tuned transformer served
over HTTP; for desk-scale work there is a deterministic synthetic generator
and an on-disk cache so experiments never need the model server.

Cache file format (append-only records, little-endian):
    sha256(query US passage)  32 bytes
    dim                       uint32
    values                    dim * float32
where US is the unit separator character (U+001F).
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol

import numpy as np

log = logging.getLogger("convsearch.embed")

DEFAULT_DIM = 768

_KEY_SEPARATOR = "\x1f"
_WORD_RE = re.compile(r"[^\W_]+", re.UNICODE)


class EmbedTransportError(RuntimeError):
    """Raised when the embedding service cannot be reached or times out."""


class EmbeddingDimensionError(ValueError):
    """Raised when a vector's dimension disagrees with the configured one."""


@dataclass(frozen=True)
class EmbeddingKey:
    query: str
    passage: str

    def digest(self) -> bytes:
        joined = self.query + _KEY_SEPARATOR + self.passage
        return hashlib.sha256(joined.encode("utf-8")).digest()


@dataclass(frozen=True)
class EmbeddingVector:
    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values)
        if arr.ndim != 1 or arr.size == 0:
            raise EmbeddingDimensionError(f"expected a non-empty vector, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("embedding contains non-finite values")
        object.__setattr__(self, "values", arr)

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


class EmbeddingProvider(Protocol):
    dim: int
    calls: int

    def embed_pair(self, key: EmbeddingKey) -> np.ndarray: ...


# ---------------------------------------------------------------------------
# Synthetic vectors.


def _keyed_normal(seed: int, dim: int, namespace: str, text: str) -> np.ndarray:
    """Standard normal draw keyed by (seed, namespace, sha256(text)), float64."""
    digest = hashlib.sha256(
        (namespace + _KEY_SEPARATOR + text).encode("utf-8")
    ).digest()
    words = struct.unpack("<8I", digest)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *words])))
    return rng.standard_normal(dim)


def _unit(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        out = np.zeros_like(vec)
        out[0] = 1.0
        return out
    return vec / norm


def synthetic_embed(key: EmbeddingKey, dim: int = DEFAULT_DIM, seed: int = 0) -> np.ndarray:
    """Deterministic unit-norm pair vector, stable across runs and platforms.

    The stream is keyed by (seed, sha256 of the joined key), so any change
    to query or passage text produces an unrelated vector.
    """
    if dim <= 0:
        raise EmbeddingDimensionError(f"dim must be positive, got {dim}")
    raw = _keyed_normal(seed, dim, "pair", key.query + _KEY_SEPARATOR + key.passage)
    return _unit(raw)


class SyntheticEmbeddingProvider:
    """Hash-seeded random unit vectors; no model, no I/O."""

    def __init__(self, dim: int = DEFAULT_DIM, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self.calls = 0

    def embed_pair(self, key: EmbeddingKey) -> np.ndarray:
        self.calls += 1
        return synthetic_embed(key, self.dim, self.seed).astype(np.float32)


def _first_token(text: str) -> str | None:
    match = _WORD_RE.search(text.lower())
    return match.group(0) if match else None


class TopicalSyntheticProvider:
    """Synthetic vectors with topical structure, a stand-in for a tuned encoder.

    The vector is normalize(v(topic) + match_weight * hit * g + noise_weight
    * v(pair)), where the topic term is the passage's first token, hit is 1
    when that term also occurs in the query and 0 otherwise, and g is a fixed
    direction.  Same-topic pairs therefore cluster, and pairs whose passage
    lexically answers the query share a learnable component, mirroring how a
    relevance-tuned encoder separates answering from non-answering pairs.
    """

    def __init__(
        self,
        dim: int = DEFAULT_DIM,
        seed: int = 0,
        match_weight: float = 0.6,
        noise_weight: float = 0.05,
    ):
        self.dim = dim
        self.seed = seed
        self.match_weight = match_weight
        self.noise_weight = noise_weight
        self.calls = 0

    def topic_vector(self, term: str) -> np.ndarray:
        return _unit(_keyed_normal(self.seed, self.dim, "topic", term))

    def match_direction(self) -> np.ndarray:
        return _unit(_keyed_normal(self.seed, self.dim, "match", ""))

    def embed_pair(self, key: EmbeddingKey) -> np.ndarray:
        self.calls += 1
        topic = _first_token(key.passage)
        noise = _unit(
            _keyed_normal(
                self.seed, self.dim, "pair", key.query + _KEY_SEPARATOR + key.passage
            )
        )
        if topic is None:
            return _unit(noise).astype(np.float32)
        vec = self.topic_vector(topic) + self.noise_weight * noise
        query_terms = set(_WORD_RE.findall(key.query.lower()))
        if topic in query_terms:
            vec = vec + self.match_weight * self.match_direction()
        return _unit(vec).astype(np.float32)


class DictEmbeddingProvider:
    """Serves precomputed vectors from a mapping; raises on unknown keys."""

    def __init__(self, table: dict[EmbeddingKey, np.ndarray], dim: int):
        self.table = dict(table)
        self.dim = dim
        self.calls = 0

    def embed_pair(self, key: EmbeddingKey) -> np.ndarray:
        self.calls += 1
        try:
            vec = self.table[key]
        except KeyError:
            raise KeyError(f"no precomputed embedding for {key!r}") from None
        return np.asarray(vec, dtype=np.float32)


# ---------------------------------------------------------------------------
# On-disk cache.


class EmbeddingCache:
    """Content-addressed append-only cache of pair vectors.

    Records are keyed by sha256 of the joined pair text; the latest record
    for a digest wins.  A truncated or implausible trailing record is
    logged and treated as a miss (framing is lost past the first bad
    record, so reading stops there).
    """

    _HEADER = struct.Struct("<32sI")
    _MAX_DIM = 1 << 20

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._table: dict[bytes, np.ndarray] = {}
        if self.path.exists():
            self._load()

    def _load(self) -> None:
        blob = self.path.read_bytes()
        offset = 0
        while offset < len(blob):
            if offset + self._HEADER.size > len(blob):
                log.warning("%s: truncated cache record at byte %d", self.path, offset)
                break
            digest, dim = self._HEADER.unpack_from(blob, offset)
            offset += self._HEADER.size
            if not 0 < dim <= self._MAX_DIM:
                log.warning("%s: corrupt cache record at byte %d", self.path, offset)
                break
            nbytes = 4 * dim
            if offset + nbytes > len(blob):
                log.warning("%s: truncated cache record at byte %d", self.path, offset)
                break
            values = np.frombuffer(blob, dtype="<f4", count=dim, offset=offset).copy()
            offset += nbytes
            self._table[digest] = values

    def __len__(self) -> int:
        return len(self._table)

    def get(self, key: EmbeddingKey) -> np.ndarray | None:
        vec = self._table.get(key.digest())
        return None if vec is None else vec.copy()

    def put(self, key: EmbeddingKey, values: np.ndarray) -> None:
        vec = np.asarray(values, dtype="<f4").ravel()
        digest = key.digest()
        with open(self.path, "ab") as fh:
            fh.write(self._HEADER.pack(digest, vec.shape[0]))
            fh.write(vec.tobytes())
        self._table[digest] = vec.copy()

    def export_jsonl(self, out_path: str | Path) -> int:
        """Dump records as JSONL for inspection; returns the record count."""
        with open(out_path, "w", encoding="utf-8") as fh:
            for digest, values in self._table.items():
                fh.write(
                    json.dumps(
                        {
                            "sha256": digest.hex(),
                            "dim": int(values.shape[0]),
                            "values": [float(v) for v in values],
                        }
                    )
                    + "\n"
                )
        return len(self._table)


class CachedEmbeddingProvider:
    """Cache wrapper; serves hits from disk and delegates misses."""

    def __init__(self, inner: EmbeddingProvider, cache: EmbeddingCache):
        self.inner = inner
        self.cache = cache
        self.dim = inner.dim
        self.calls = 0

    def embed_pair(self, key: EmbeddingKey) -> np.ndarray:
        self.calls += 1
        hit = self.cache.get(key)
        if hit is not None:
            if hit.shape[0] != self.dim:
                raise EmbeddingDimensionError(
                    f"cached vector has dim {hit.shape[0]}, expected {self.dim}"
                )
            return hit
        vec = np.asarray(self.inner.embed_pair(key), dtype=np.float32)
        if vec.shape[0] != self.dim:
            raise EmbeddingDimensionError(
                f"provider returned dim {vec.shape[0]}, expected {self.dim}"
            )
        self.cache.put(key, vec)
        return vec


# ---------------------------------------------------------------------------
# HTTP sidecar client.


class SidecarEmbeddingProvider:
    """Client for the model-serving sidecar's /embed endpoint."""

    def __init__(
        self,
        base_url: str,
        expected_dim: int | None = None,
        timeout: float = 30.0,
        batch_size: int = 32,
    ):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.batch_size = batch_size
        self.dim = expected_dim if expected_dim is not None else self._probe_dim()
        self.calls = 0

    def _probe_dim(self) -> int:
        import requests

        try:
            resp = requests.get(f"{self.base_url}/health", timeout=self.timeout)
            resp.raise_for_status()
            return int(resp.json()["embedding_dim"])
        except requests.RequestException as exc:
            raise EmbedTransportError(f"health check failed: {exc}") from exc

    def _post_batch(self, keys: list[EmbeddingKey]) -> list[np.ndarray]:
        import requests

        payload = {"pairs": [{"query": k.query, "passage": k.passage} for k in keys]}
        try:
            resp = requests.post(
                f"{self.base_url}/embed", json=payload, timeout=self.timeout
            )
            resp.raise_for_status()
            body = resp.json()
        except requests.RequestException as exc:
            raise EmbedTransportError(f"embed request failed: {exc}") from exc
        dim = int(body["dim"])
        if dim != self.dim:
            raise EmbeddingDimensionError(
                f"service reports dim {dim}, expected {self.dim}"
            )
        vectors = body["vectors"]
        if len(vectors) != len(keys):
            raise EmbedTransportError(
                f"service returned {len(vectors)} vectors for {len(keys)} pairs"
            )
        out = []
        for vec in vectors:
            arr = np.asarray(vec, dtype=np.float32)
            if arr.shape != (self.dim,):
                raise EmbeddingDimensionError(
                    f"service vector has shape {arr.shape}, expected ({self.dim},)"
                )
            out.append(arr)
        return out

    def embed_pair(self, key: EmbeddingKey) -> np.ndarray:
        self.calls += 1
        return self._post_batch([key])[0]

    def embed_batch(self, keys: list[EmbeddingKey]) -> list[np.ndarray]:
        self.calls += len(keys)
        out: list[np.ndarray] = []
        for start in range(0, len(keys), self.batch_size):
            out.extend(self._post_batch(keys[start : start + self.batch_size]))
        return out


def embed_pair(key: EmbeddingKey, provider: EmbeddingProvider) -> EmbeddingVector:
    """Fetch and validate one pair embedding from any provider."""
    vec = np.asarray(provider.embed_pair(key))
    if vec.ndim != 1 or vec.shape[0] != provider.dim:
        raise EmbeddingDimensionError(
            f"provider returned shape {vec.shape}, expected ({provider.dim},)"
        )
    return EmbeddingVector(vec)


def embed_batch(keys: Iterable[EmbeddingKey], provider: EmbeddingProvider) -> list[np.ndarray]:
    """Batch helper; uses the provider's native batching when offered."""
    keys = list(keys)
    native = getattr(provider, "embed_batch", None)
    if native is not None:
        return [np.asarray(v, dtype=np.float32) for v in native(keys)]
    return [np.asarray(provider.embed_pair(k), dtype=np.float32) for k in keys]
