"""Command line launcher for the model-serving sidecar."""

from __future__ import annotations

import argparse
import os

from .app import DEFAULT_MAX_BATCH, create_app
from .backends import RealBackend, StubBackend


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="convsearch-sidecar",
        description="Serve pair embeddings and conversational rewrites over HTTP.",
    )
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8090)
    parser.add_argument(
        "--stub", action="store_true",
        help="serve deterministic synthetic embeddings and echo rewrites",
    )
    parser.add_argument("--dim", type=int, default=768)
    parser.add_argument("--seed", type=int, default=0, help="stub vector seed")
    parser.add_argument("--max-batch", type=int, default=DEFAULT_MAX_BATCH)
    parser.add_argument("--max-seq", type=int, default=512)
    parser.add_argument(
        "--embed-model",
        default=os.environ.get("SIDECAR_EMBED_MODEL"),
        help="encoder checkpoint path or hub id (required without --stub)",
    )
    parser.add_argument(
        "--rewrite-model",
        default=os.environ.get("SIDECAR_REWRITE_MODEL"),
        help="seq2seq rewriter checkpoint; omit to echo rewrites",
    )
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.stub:
        backend = StubBackend(dim=args.dim, max_seq=args.max_seq, seed=args.seed)
    elif args.embed_model:
        backend = RealBackend(
            args.embed_model, args.rewrite_model, dim=args.dim, max_seq=args.max_seq
        )
    else:
        parser.error("--embed-model is required unless --stub is set")

    import uvicorn

    uvicorn.run(
        create_app(backend, max_batch=args.max_batch),
        host=args.host,
        port=args.port,
        log_level="warning",
    )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
