"""Embedding and rewrite backends behind the HTTP surface.

The stub backend serves the same deterministic pair vectors as the search
package's synthetic provider, so integration tests can compare transport
and local embeddings bit for bit without downloading a model.  The real
backend loads transformer checkpoints on a worker thread and answers 503
until they are in memory.
"""

from __future__ import annotations

import re
import threading
from dataclasses import dataclass

from convsearch.embed import EmbeddingKey, synthetic_embed
from convsearch.rewrite import CTX_TOKEN, TURN_TOKEN

MAX_REWRITE_TOKENS = 64

_TOKEN_RE = re.compile(r"\S+")


def truncate_pair(query: str, passage: str, max_tokens: int) -> tuple[str, str]:
    """Fit a pair into the token budget, trimming the passage first.

    The query carries the information need, so it only loses tokens once
    the passage is gone entirely.
    """
    if max_tokens <= 0:
        raise ValueError(f"token budget must be positive, got {max_tokens}")
    q = _TOKEN_RE.findall(query)
    p = _TOKEN_RE.findall(passage)
    if len(q) + len(p) <= max_tokens:
        return query, passage
    p = p[: max(0, max_tokens - len(q))]
    q = q[: max_tokens - len(p)]
    return " ".join(q), " ".join(p)


def rewrite_input_text(current: str, history: list[str]) -> str:
    """Reassemble the flat rewriter input from its wire form."""
    parts = [current.strip(), CTX_TOKEN]
    for i, chunk in enumerate(history):
        if i > 0:
            parts.append(TURN_TOKEN)
        parts.append(chunk.strip())
    return " ".join(parts).strip()


@dataclass
class StubBackend:
    """Deterministic synthetic embeddings and echo rewrites."""

    dim: int = 768
    max_seq: int = 512
    seed: int = 0

    def ready(self) -> bool:
        return True

    def identifiers(self) -> dict:
        return {"embedder": f"stub-synthetic-{self.dim}", "rewriter": "stub-echo"}

    def embed(self, pairs: list[tuple[str, str]]) -> list[list[float]]:
        out = []
        for query, passage in pairs:
            q, p = truncate_pair(query, passage, self.max_seq)
            vec = synthetic_embed(EmbeddingKey(q, p), dim=self.dim, seed=self.seed)
            out.append([float(v) for v in vec])
        return out

    def rewrite(self, current: str, history: list[str]) -> str:
        del history  # echo mode reproduces the current query
        return " ".join(_TOKEN_RE.findall(current)[:MAX_REWRITE_TOKENS])


class RealBackend:
    """Transformer-backed encoder and rewriter.

    Checkpoints load on a daemon thread so the service can come up and
    answer health probes immediately.  Inference holds a lock: the models
    are not thread-safe and the wire contract only promises per-request
    batching, not cross-request parallelism.
    """

    def __init__(
        self,
        embed_model: str,
        rewrite_model: str | None = None,
        dim: int = 768,
        max_seq: int = 512,
    ):
        self.embed_model = embed_model
        self.rewrite_model = rewrite_model
        self.dim = dim
        self.max_seq = max_seq
        self.load_error: str | None = None
        self._lock = threading.Lock()
        self._loaded = False
        self._thread = threading.Thread(target=self._load, daemon=True)
        self._thread.start()

    def ready(self) -> bool:
        return self._loaded

    def identifiers(self) -> dict:
        return {
            "embedder": self.embed_model,
            "rewriter": self.rewrite_model or "none",
        }

    def _load(self) -> None:
        try:
            import torch  # noqa: F401
            from transformers import AutoModel, AutoTokenizer

            self._enc_tok = AutoTokenizer.from_pretrained(self.embed_model)
            self._enc = AutoModel.from_pretrained(self.embed_model).eval()
            if self.rewrite_model:
                from transformers import AutoModelForSeq2SeqLM

                self._rw_tok = AutoTokenizer.from_pretrained(self.rewrite_model)
                self._rw = AutoModelForSeq2SeqLM.from_pretrained(
                    self.rewrite_model
                ).eval()
            self._loaded = True
        except Exception as exc:  # pragma: no cover - needs checkpoints on disk
            self.load_error = str(exc)

    def _pair_input_ids(self, query: str, passage: str) -> list[int]:
        tok = self._enc_tok
        q_ids = tok.encode(query, add_special_tokens=False)
        p_ids = tok.encode(passage, add_special_tokens=False)
        budget = self.max_seq - 3  # room for [CLS] and both [SEP]s
        if len(q_ids) + len(p_ids) > budget:
            p_ids = p_ids[: max(0, budget - len(q_ids))]
            q_ids = q_ids[: budget - len(p_ids)]
        return (
            [tok.cls_token_id] + q_ids + [tok.sep_token_id] + p_ids + [tok.sep_token_id]
        )

    def embed(self, pairs: list[tuple[str, str]]) -> list[list[float]]:
        import torch

        with self._lock, torch.no_grad():
            out = []
            for query, passage in pairs:
                ids = torch.tensor([self._pair_input_ids(query, passage)])
                hidden = self._enc(input_ids=ids).last_hidden_state
                out.append(hidden[0, 0].tolist())  # first-position vector
            return out

    def rewrite(self, current: str, history: list[str]) -> str:
        import torch

        if not self.rewrite_model:
            return StubBackend().rewrite(current, history)
        text = rewrite_input_text(current, history)
        with self._lock, torch.no_grad():
            ids = self._rw_tok(
                text, return_tensors="pt", truncation=True, max_length=self.max_seq
            ).input_ids
            out = self._rw.generate(
                ids, max_new_tokens=MAX_REWRITE_TOKENS, do_sample=False, num_beams=1
            )
            return self._rw_tok.decode(out[0], skip_special_tokens=True).strip()
