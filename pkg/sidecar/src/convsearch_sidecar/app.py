"""HTTP surface: /embed, /rewrite, and /health."""

from __future__ import annotations

from fastapi import FastAPI, HTTPException
from fastapi.responses import JSONResponse
from pydantic import BaseModel

DEFAULT_MAX_BATCH = 64


class PairItem(BaseModel):
    query: str
    passage: str


class EmbedRequest(BaseModel):
    pairs: list[PairItem]


class HistoryItem(BaseModel):
    query: str
    passage: str | None = None


class RewriteRequest(BaseModel):
    current: str
    # clients may send pre-joined "query passage" chunks or structured turns
    history: list[str | HistoryItem] = []


def create_app(backend, max_batch: int = DEFAULT_MAX_BATCH) -> FastAPI:
    app = FastAPI(title="convsearch sidecar", docs_url=None, redoc_url=None)

    def require_ready() -> None:
        if not backend.ready():
            detail = "model not ready"
            error = getattr(backend, "load_error", None)
            if error:
                detail = f"model failed to load: {error}"
            raise HTTPException(status_code=503, detail=detail)

    @app.get("/health")
    def health() -> JSONResponse:
        ready = backend.ready()
        body = {
            "status": "ready" if ready else "loading",
            "embedding_dim": backend.dim,
            "models": backend.identifiers(),
        }
        return JSONResponse(body, status_code=200 if ready else 503)

    @app.post("/embed")
    def embed(request: EmbedRequest) -> dict:
        require_ready()
        if len(request.pairs) > max_batch:
            raise HTTPException(
                status_code=413,
                detail=f"batch of {len(request.pairs)} pairs exceeds limit {max_batch}",
            )
        for i, pair in enumerate(request.pairs):
            if not pair.passage:
                raise HTTPException(
                    status_code=400, detail=f"pair {i} has an empty passage"
                )
        vectors = backend.embed([(p.query, p.passage) for p in request.pairs])
        return {"dim": backend.dim, "vectors": vectors}

    @app.post("/rewrite")
    def rewrite(request: RewriteRequest) -> dict:
        require_ready()
        if not request.current.strip():
            raise HTTPException(status_code=422, detail="current query is empty")
        history = [
            h if isinstance(h, str)
            else (f"{h.query} {h.passage}" if h.passage else h.query)
            for h in request.history
        ]
        rewritten = backend.rewrite(request.current, history)
        return {"rewritten": rewritten, "empty": not rewritten}

    return app
