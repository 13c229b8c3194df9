"""Protocol server: one worker per connection, model access serialized
behind a lock, one request in flight per connection, graceful shutdown
when the peer closes its stream."""

from __future__ import annotations

import socketserver
import sys
import threading
import time
from dataclasses import dataclass

from .protocol import (
    PROTOCOL_VERSION,
    BridgeProtocolError,
    decode_image,
    error_message,
    parse_line,
    ready_message,
    result_message,
    serialize,
    validate_request,
)


@dataclass(frozen=True)
class BridgeConfig:
    tasks: tuple[str, ...] = ("detection", "segmentation")
    score_def: str = "mean-confidence"
    device: str = "cpu"
    timeout_budget_ms: float = 30000.0

    def __post_init__(self):
        if not self.tasks:
            raise ValueError("at least one task must be enabled")
        if self.score_def not in ("neg-loss", "mean-confidence"):
            raise ValueError(f"unknown score definition {self.score_def!r}")


def _handle_score(model, cfg: BridgeConfig, msg: dict, lock: threading.Lock) -> dict:
    req_id = msg["id"]
    try:
        rgb = decode_image(msg["image"])
    except BridgeProtocolError as exc:
        return error_message(req_id, f"bad image: {exc}")
    tasks = [t for t in msg["tasks"] if t in cfg.tasks and t in model.tasks]
    if not tasks:
        return error_message(req_id, f"no enabled task among {msg['tasks']!r}")
    started = time.perf_counter()
    try:
        with lock:
            scores, detections, mask_path = model.score_image(rgb, tasks)
    except Exception as exc:
        return error_message(req_id, f"inference failed: {exc}")
    elapsed_ms = (time.perf_counter() - started) * 1000.0
    if elapsed_ms > cfg.timeout_budget_ms:
        return error_message(req_id, f"inference exceeded budget: {elapsed_ms:.0f} ms")
    return result_message(req_id, scores, detections, mask_path, timing_ms=elapsed_ms)


def serve_stream(model, cfg: BridgeConfig, in_stream, out_stream, lock: threading.Lock | None = None):
    """Answer one connection until its input stream closes."""
    lock = lock or threading.Lock()

    def emit(msg: dict):
        out_stream.write(serialize(msg) + "\n")
        out_stream.flush()

    for line in in_stream:
        if not line.strip():
            continue
        try:
            msg = parse_line(line)
            validate_request(msg)
        except BridgeProtocolError as exc:
            emit(error_message(0, f"protocol error: {exc}"))
            continue
        if msg["type"] == "hello":
            if msg["version"] != PROTOCOL_VERSION:
                emit(error_message(0, f"version mismatch: server speaks {PROTOCOL_VERSION}, client sent {msg['version']}"))
                return
            served = [t for t in msg["tasks"] if t in cfg.tasks and t in model.tasks]
            emit(ready_message(served or [t for t in cfg.tasks if t in model.tasks]))
        else:
            emit(_handle_score(model, cfg, msg, lock))


def serve_stdio(model, cfg: BridgeConfig) -> None:
    serve_stream(model, cfg, sys.stdin, sys.stdout)


def serve_tcp(model, cfg: BridgeConfig, port: int, host: str = "127.0.0.1", announce=None):
    """Blocking TCP server; one handler thread per connection."""
    lock = threading.Lock()

    class Handler(socketserver.StreamRequestHandler):
        def handle(self):
            reader = (raw.decode("utf-8") for raw in self.rfile)

            class _Out:
                def write(inner, text):
                    self.wfile.write(text.encode("utf-8"))

                def flush(inner):
                    self.wfile.flush()

            serve_stream(model, cfg, reader, _Out(), lock=lock)

    class Server(socketserver.ThreadingTCPServer):
        allow_reuse_address = True
        daemon_threads = True

    with Server((host, port), Handler) as server:
        if announce:
            announce(server.server_address[1])
        server.serve_forever()
