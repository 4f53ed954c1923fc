"""Model-serving sidecar for the conversational search pipeline."""

from .app import create_app
from .backends import RealBackend, StubBackend, truncate_pair

__all__ = ["create_app", "RealBackend", "StubBackend", "truncate_pair"]
