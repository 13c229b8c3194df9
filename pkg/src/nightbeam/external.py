"""Client side of the external-scorer wire protocol.

Version 1, newline-delimited JSON over a byte stream: either the
standard I/O of a child process (``exec:<command>``) or a TCP socket
(``tcp:<host>:<port>``).  One request is in flight per connection.

Handshake:   -> {"type":"hello","version":1,"tasks":[...]}
             <- {"type":"ready","tasks":[...]}
Scoring:     -> {"type":"score","id":N,"image":{"encoding":...},"tasks":[...]}
             <- {"type":"result","id":N,"scores":{...},"detections":[...]}
Failures:    <- {"type":"error","id":N,"message":...}
"""

from __future__ import annotations

import base64
import json
import os
import queue
import shlex
import socket
import subprocess
import tempfile
import threading
import time
from pathlib import Path

import cv2
import numpy as np

from .errors import (
    ConfigError,
    ProtocolError,
    ScorerError,
    ScorerTimeoutError,
    TransportError,
    VersionMismatchError,
)
from .images import Image
from .scoring import Detection, ScoreReport

PROTOCOL_VERSION = 1
DEFAULT_TIMEOUT_MS = 10000.0
TIMEOUT_ENV_VAR = "LIDAS_SCORER_TIMEOUT_MS"


def resolve_timeout_ms(explicit: float | None = None) -> float:
    """Explicit value wins; otherwise the environment override, then the
    default."""
    if explicit is not None:
        return float(explicit)
    env = os.environ.get(TIMEOUT_ENV_VAR)
    if env:
        try:
            return float(env)
        except ValueError as exc:
            raise ConfigError(f"{TIMEOUT_ENV_VAR} must be numeric, got {env!r}") from exc
    return DEFAULT_TIMEOUT_MS


def build_hello(tasks) -> dict:
    return {"type": "hello", "version": PROTOCOL_VERSION, "tasks": list(tasks)}


def encode_image_png_b64(image: Image) -> dict:
    q = np.round(image.data * 255.0).astype(np.uint8)
    if image.channels == 3:
        q = cv2.cvtColor(q, cv2.COLOR_RGB2BGR)
    else:
        q = q[:, :, 0]
    ok, buf = cv2.imencode(".png", q)
    if not ok:
        raise ScorerError("failed to encode image for the scorer")
    return {"encoding": "png-base64", "data": base64.b64encode(buf.tobytes()).decode("ascii")}


def build_score_request(request_id: int, image_payload: dict, tasks) -> dict:
    return {"type": "score", "id": request_id, "image": image_payload, "tasks": list(tasks)}


def parse_result(obj: dict, elapsed_ms: float = 0.0) -> ScoreReport:
    """Turn a result message into a ScoreReport; raises on bad shape."""
    try:
        scores = {str(k): float(v) for k, v in obj["scores"].items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"malformed result message: {obj!r}") from exc
    detections = None
    if obj.get("detections") is not None:
        try:
            detections = tuple(
                Detection(cls=int(d["cls"]), box=tuple(d["box"]), conf=float(d["conf"]))
                for d in obj["detections"]
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed detections in result: {obj!r}") from exc
    return ScoreReport(
        scores=scores,
        total=sum(scores.values()),
        detections=detections,
        mask_path=obj.get("mask_path"),
        timing_ms=elapsed_ms,
    )


def external_score(endpoint: str, image: Image, tasks=("detection",), timeout_ms: float | None = None) -> ScoreReport:
    """One-shot convenience: connect, score a single image, close."""
    with ExternalScorerClient(endpoint, tasks=tasks, timeout_ms=timeout_ms) as client:
        return client.score(image)


class _StdioTransport:
    """Child process speaking the protocol on its standard streams."""

    def __init__(self, command: str):
        try:
            self.proc = subprocess.Popen(
                shlex.split(command),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise TransportError(f"failed to launch scorer process: {exc}") from exc
        self._lines: queue.Queue = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()

    def _pump(self):
        try:
            for line in self.proc.stdout:
                self._lines.put(line)
        finally:
            self._lines.put(None)

    def send_line(self, line: str):
        try:
            self.proc.stdin.write(line + "\n")
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise TransportError(f"scorer process closed its input: {exc}") from exc

    def recv_line(self, timeout_s: float) -> str:
        try:
            line = self._lines.get(timeout=timeout_s)
        except queue.Empty:
            raise ScorerTimeoutError(f"no scorer response within {timeout_s * 1000:.0f} ms")
        if line is None:
            raise TransportError("scorer process closed the stream")
        return line

    def close(self):
        if self.proc.poll() is None:
            try:
                self.proc.stdin.close()
            except OSError:
                pass
            try:
                self.proc.wait(timeout=2.0)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()


class _TcpTransport:
    def __init__(self, host: str, port: int, timeout_s: float):
        try:
            self.sock = socket.create_connection((host, port), timeout=timeout_s)
        except OSError as exc:
            raise TransportError(f"cannot reach scorer at {host}:{port}: {exc}") from exc
        self.reader = self.sock.makefile("r", encoding="utf-8", newline="\n")

    def send_line(self, line: str):
        try:
            self.sock.sendall((line + "\n").encode("utf-8"))
        except OSError as exc:
            raise TransportError(f"scorer connection lost: {exc}") from exc

    def recv_line(self, timeout_s: float) -> str:
        self.sock.settimeout(timeout_s)
        try:
            line = self.reader.readline()
        except socket.timeout:
            raise ScorerTimeoutError(f"no scorer response within {timeout_s * 1000:.0f} ms")
        except OSError as exc:
            raise TransportError(f"scorer connection lost: {exc}") from exc
        if line == "":
            raise TransportError("scorer closed the connection")
        return line

    def close(self):
        # the makefile wrapper holds the fd open; close it first so the
        # peer actually observes EOF
        try:
            self.reader.close()
        except OSError:
            pass
        try:
            self.sock.close()
        except OSError:
            pass


class ExternalScorerClient:
    """One connection to an external scorer; not shared across workers."""

    def __init__(
        self,
        endpoint: str,
        tasks=("detection",),
        timeout_ms: float | None = None,
        encoding: str = "png-base64",
    ):
        self.timeout_ms = resolve_timeout_ms(timeout_ms)
        self.tasks = tuple(tasks)
        if encoding not in ("png-base64", "path"):
            raise ConfigError(f"unknown image encoding {encoding!r}")
        self.encoding = encoding
        self._id = 0
        self._spool = None

        if endpoint.startswith("exec:"):
            self._transport = _StdioTransport(endpoint[len("exec:"):])
        elif endpoint.startswith("tcp:"):
            try:
                host, port = endpoint[len("tcp:"):].rsplit(":", 1)
                port = int(port)
            except ValueError as exc:
                raise ConfigError(f"bad tcp endpoint {endpoint!r}") from exc
            self._transport = _TcpTransport(host, port, self.timeout_ms / 1000.0)
        else:
            raise ConfigError(f"endpoint must start with exec: or tcp:, got {endpoint!r}")

        self._handshake()

    def _handshake(self):
        self._transport.send_line(json.dumps(build_hello(self.tasks), sort_keys=True))
        msg = self._read_message()
        if msg.get("type") == "error":
            text = str(msg.get("message", ""))
            self.close()
            if "version" in text.lower():
                raise VersionMismatchError(text)
            raise ProtocolError(f"scorer rejected handshake: {text}")
        if msg.get("type") != "ready":
            self.close()
            raise ProtocolError(f"expected ready, got {msg!r}")
        self.served_tasks = tuple(msg.get("tasks", ()))

    def _read_message(self) -> dict:
        line = self._transport.recv_line(self.timeout_ms / 1000.0)
        try:
            msg = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"scorer sent a non-JSON line: {line!r}") from exc
        if not isinstance(msg, dict) or "type" not in msg:
            raise ProtocolError(f"scorer sent an invalid message: {line!r}")
        return msg

    def _image_payload(self, image: Image) -> dict:
        if self.encoding == "png-base64":
            return encode_image_png_b64(image)
        if self._spool is None:
            self._spool = tempfile.mkdtemp(prefix="nightbeam_scorer_")
        from .io import write_image_png

        path = Path(self._spool) / f"req_{self._id:06d}.png"
        write_image_png(path, image, bit_depth=16)
        return {"encoding": "path", "data": str(path)}

    def score(self, image: Image, tasks=None) -> ScoreReport:
        """Send one score request and wait for the matching result."""
        self._id += 1
        req_id = self._id
        payload = self._image_payload(image)
        request = build_score_request(req_id, payload, tasks or self.tasks)
        started = time.perf_counter()
        self._transport.send_line(json.dumps(request, sort_keys=True))
        msg = self._read_message()
        elapsed_ms = (time.perf_counter() - started) * 1000.0
        if payload["encoding"] == "path":
            Path(payload["data"]).unlink(missing_ok=True)
        if msg.get("type") == "error":
            raise ScorerError(f"scorer error for request {req_id}: {msg.get('message')}")
        if msg.get("type") != "result" or msg.get("id") != req_id:
            raise ProtocolError(f"expected result for id {req_id}, got {msg!r}")
        return parse_result(msg, elapsed_ms)

    def close(self):
        self._transport.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
