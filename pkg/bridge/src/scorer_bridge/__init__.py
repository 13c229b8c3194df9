"""Scoring server for the newline-delimited JSON scorer protocol.

Wraps frozen perception models behind the version-1 wire schema; the
built-in stub model keeps CI and integration tests free of model
weights.
"""

__version__ = "0.1.0"

from .protocol import PROTOCOL_VERSION
from .server import BridgeConfig, serve_stdio, serve_stream, serve_tcp
from .stub import StubModel

__all__ = [
    "PROTOCOL_VERSION",
    "BridgeConfig",
    "StubModel",
    "serve_stdio",
    "serve_stream",
    "serve_tcp",
]
