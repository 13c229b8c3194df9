from __future__ import annotations

import base64
import json
import socketserver
import sys
import threading
import time
from pathlib import Path

import numpy as np
import pytest

from nightbeam.errors import (
    ConfigError,
    ProtocolError,
    ScorerError,
    ScorerTimeoutError,
    TransportError,
    VersionMismatchError,
)
from nightbeam.external import (
    DEFAULT_TIMEOUT_MS,
    ExternalScorerClient,
    TIMEOUT_ENV_VAR,
    build_hello,
    build_score_request,
    encode_image_png_b64,
    external_score,
    parse_result,
    resolve_timeout_ms,
)
from nightbeam.images import Image

STUB = f"{sys.executable} {Path(__file__).parent / 'stub_scorer.py'}"
GOLDEN = Path(__file__).parent / "golden"


def small_image(value=0.5):
    return Image(np.full((8, 8, 3), value, dtype=np.float32))


class TestTimeoutResolution:
    def test_default(self, monkeypatch):
        monkeypatch.delenv(TIMEOUT_ENV_VAR, raising=False)
        assert resolve_timeout_ms(None) == DEFAULT_TIMEOUT_MS

    def test_env_override(self, monkeypatch):
        monkeypatch.setenv(TIMEOUT_ENV_VAR, "2500")
        assert resolve_timeout_ms(None) == 2500.0

    def test_explicit_wins(self, monkeypatch):
        monkeypatch.setenv(TIMEOUT_ENV_VAR, "2500")
        assert resolve_timeout_ms(100.0) == 100.0

    def test_bad_env(self, monkeypatch):
        monkeypatch.setenv(TIMEOUT_ENV_VAR, "soon")
        with pytest.raises(ConfigError):
            resolve_timeout_ms(None)


class TestMessages:
    def test_hello_shape(self):
        assert build_hello(["detection"]) == {"type": "hello", "version": 1, "tasks": ["detection"]}

    def test_request_matches_golden(self):
        req = build_score_request(
            7,
            {"encoding": "path", "data": "/data/frames/frame_0007.png"},
            ["detection", "segmentation"],
        )
        golden = json.loads((GOLDEN / "score_request.json").read_text())
        assert req == golden
        # serialized form round-trips identically
        assert json.loads(json.dumps(req, sort_keys=True)) == golden

    def test_response_matches_golden_field_for_field(self):
        obj = json.loads((GOLDEN / "score_response.json").read_text())
        report = parse_result(obj, elapsed_ms=3.5)
        assert report.scores == {"detection": 0.3125, "segmentation": 0.5}
        assert report.total == pytest.approx(0.8125)
        assert len(report.detections) == 2
        assert report.detections[0].cls == 0
        assert report.detections[0].box == (4.0, 8.0, 20.0, 31.0)
        assert report.detections[0].conf == 0.875
        assert report.detections[1].cls == 2
        assert report.mask_path == "/data/masks/frame_0007.png"
        assert report.timing_ms == 3.5

    def test_malformed_result_rejected(self):
        with pytest.raises(ProtocolError):
            parse_result({"type": "result", "id": 1})
        with pytest.raises(ProtocolError):
            parse_result({"type": "result", "id": 1, "scores": {"detection": "high"}})

    def test_png_b64_payload_decodes(self):
        import cv2

        img = small_image(0.25)
        payload = encode_image_png_b64(img)
        assert payload["encoding"] == "png-base64"
        raw = np.frombuffer(base64.b64decode(payload["data"]), dtype=np.uint8)
        decoded = cv2.imdecode(raw, cv2.IMREAD_UNCHANGED)
        assert decoded.shape == (8, 8, 3)
        assert abs(decoded.astype(np.float64).mean() / 255.0 - 0.25) < 1 / 255


class TestStdioClient:
    def test_fixed_score_roundtrip(self):
        with ExternalScorerClient(f"exec:{STUB} fixed", tasks=("detection",), timeout_ms=5000) as c:
            assert c.served_tasks == ("detection",)
            report = c.score(small_image())
            assert report.scores == {"detection": 0.42}
            assert report.detections == ()
            assert report.timing_ms > 0

    def test_malformed_response_is_protocol_error(self):
        with ExternalScorerClient(f"exec:{STUB} malformed", timeout_ms=5000) as c:
            with pytest.raises(ProtocolError):
                c.score(small_image())

    def test_server_error_message(self):
        with ExternalScorerClient(f"exec:{STUB} error", timeout_ms=5000) as c:
            with pytest.raises(ScorerError, match="inference failed"):
                c.score(small_image())

    def test_version_mismatch(self):
        with pytest.raises(VersionMismatchError):
            ExternalScorerClient(f"exec:{STUB} oldserver", timeout_ms=5000)

    def test_timeout_respected(self):
        with ExternalScorerClient(f"exec:{STUB} slow", timeout_ms=300) as c:
            started = time.perf_counter()
            with pytest.raises(ScorerTimeoutError):
                c.score(small_image())
            assert time.perf_counter() - started < 1.5

    def test_dead_process_is_transport_error(self):
        with pytest.raises(TransportError):
            ExternalScorerClient(f"exec:{STUB} die", timeout_ms=1000)

    def test_path_encoding(self):
        with ExternalScorerClient(f"exec:{STUB} fixed", timeout_ms=5000, encoding="path") as c:
            report = c.score(small_image())
            assert report.scores["detection"] == 0.42

    def test_one_shot_helper(self):
        report = external_score(f"exec:{STUB} fixed", small_image(), timeout_ms=5000)
        assert report.scores == {"detection": 0.42}


class _TcpStub(socketserver.StreamRequestHandler):
    def handle(self):
        for raw in self.rfile:
            msg = json.loads(raw)
            if msg["type"] == "hello":
                out = {"type": "ready", "tasks": msg["tasks"]}
            else:
                out = {"type": "result", "id": msg["id"], "scores": {"detection": 0.42}}
            self.wfile.write((json.dumps(out) + "\n").encode())
            self.wfile.flush()


class TestTcpClient:
    def test_roundtrip_over_tcp(self):
        server = socketserver.ThreadingTCPServer(("127.0.0.1", 0), _TcpStub)
        port = server.server_address[1]
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        try:
            with ExternalScorerClient(f"tcp:127.0.0.1:{port}", timeout_ms=5000) as c:
                report = c.score(small_image())
                assert report.scores["detection"] == 0.42
        finally:
            server.shutdown()
            server.server_close()

    def test_unreachable_endpoint(self):
        with pytest.raises(TransportError):
            ExternalScorerClient("tcp:127.0.0.1:1", timeout_ms=500)

    def test_bad_endpoint_spec(self):
        with pytest.raises(ConfigError):
            ExternalScorerClient("http://nope", timeout_ms=500)
