from __future__ import annotations

import io
import json
import socket
import subprocess
import sys
import time

import numpy as np
import pytest

from scorer_bridge.protocol import validate_response
from scorer_bridge.server import BridgeConfig, serve_stream

from test_protocol import png_payload

BRIDGE = [sys.executable, "-m", "scorer_bridge"]


def run_transcript(args, lines, timeout=30):
    proc = subprocess.run(
        BRIDGE + args,
        input="\n".join(json.dumps(m, sort_keys=True) for m in lines) + "\n",
        capture_output=True,
        text=True,
        timeout=timeout,
    )
    return proc, [json.loads(l) for l in proc.stdout.splitlines()]


def hello(tasks=("detection",), version=1):
    return {"type": "hello", "version": version, "tasks": list(tasks)}


def score_request(req_id, arr_u8, tasks=("detection",)):
    return {"type": "score", "id": req_id, "image": png_payload(arr_u8), "tasks": list(tasks)}


class TestStdioServer:
    def test_hello_ready_lists_enabled_tasks(self):
        proc, out = run_transcript(["--stub"], [hello(("detection", "segmentation"))])
        assert proc.returncode == 0
        assert out == [{"type": "ready", "tasks": ["detection", "segmentation"]}]

    def test_version_mismatch_is_error_and_shutdown(self):
        proc, out = run_transcript(["--stub"], [hello(version=99), hello()])
        assert proc.returncode == 0
        assert out[0]["type"] == "error"
        assert "version mismatch" in out[0]["message"]
        assert len(out) == 1  # server closed after rejecting the handshake

    def test_score_flow_ids_echo(self):
        arr = np.full((8, 8, 3), 200, dtype=np.uint8)
        proc, out = run_transcript(["--stub"], [hello(), score_request(11, arr), score_request(12, arr)])
        assert [m["type"] for m in out] == ["ready", "result", "result"]
        assert [m.get("id") for m in out[1:]] == [11, 12]
        for m in out:
            validate_response(m)

    def test_unknown_task_is_error(self):
        arr = np.zeros((4, 4, 3), dtype=np.uint8)
        proc, out = run_transcript(["--stub"], [hello(), score_request(1, arr, tasks=("depth",))])
        assert out[1]["type"] == "error"
        assert out[1]["id"] == 1

    def test_malformed_line_answered_not_fatal(self):
        arr = np.zeros((4, 4, 3), dtype=np.uint8)
        raw = "\n".join(
            [json.dumps(hello()), "garbage line", json.dumps(score_request(2, arr))]
        ) + "\n"
        proc = subprocess.run(BRIDGE + ["--stub"], input=raw, capture_output=True, text=True, timeout=30)
        out = [json.loads(l) for l in proc.stdout.splitlines()]
        assert [m["type"] for m in out] == ["ready", "error", "result"]

    def test_graceful_shutdown_on_stream_close(self):
        proc = subprocess.Popen(
            BRIDGE + ["--stub"], stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True
        )
        proc.stdin.write(json.dumps(hello()) + "\n")
        proc.stdin.flush()
        assert json.loads(proc.stdout.readline())["type"] == "ready"
        proc.stdin.close()
        assert proc.wait(timeout=10) == 0

    def test_model_load_failure_exits_nonzero(self):
        proc, out = run_transcript(["--detector", "fasterrcnn_resnet50_fpn:/no/such/weights.pth"], [])
        assert proc.returncode == 1
        assert out[0]["type"] == "error"
        assert "model load failure" in out[0]["message"]

    def test_bad_model_spec_exits_nonzero(self):
        proc, out = run_transcript(["--detector", "justaname"], [])
        assert proc.returncode == 1
        assert out[0]["type"] == "error"


class TestServeStreamUnit:
    def test_responses_parse_and_inference_error_contains_id(self):
        class ExplodingModel:
            tasks = ("detection",)

            def score_image(self, rgb, tasks):
                raise RuntimeError("cuda caught fire")

        cfg = BridgeConfig(tasks=("detection",))
        arr = np.zeros((4, 4, 3), dtype=np.uint8)
        lines = [json.dumps(hello()), json.dumps(score_request(9, arr))]
        out = io.StringIO()
        serve_stream(ExplodingModel(), cfg, iter(l + "\n" for l in lines), out)
        msgs = [json.loads(l) for l in out.getvalue().splitlines()]
        assert msgs[1] == {"type": "error", "id": 9, "message": "inference failed: cuda caught fire"}

    def test_timeout_budget_reported(self):
        class SlowModel:
            tasks = ("detection",)

            def score_image(self, rgb, tasks):
                time.sleep(0.05)
                return {"detection": 1.0}, None, None

        cfg = BridgeConfig(tasks=("detection",), timeout_budget_ms=1.0)
        arr = np.zeros((4, 4, 3), dtype=np.uint8)
        out = io.StringIO()
        serve_stream(SlowModel(), cfg, iter([json.dumps(hello()) + "\n", json.dumps(score_request(1, arr)) + "\n"]), out)
        msgs = [json.loads(l) for l in out.getvalue().splitlines()]
        assert msgs[1]["type"] == "error"
        assert "budget" in msgs[1]["message"]

    def test_config_requires_tasks(self):
        with pytest.raises(ValueError):
            BridgeConfig(tasks=())


class TestTcpServer:
    def test_tcp_roundtrip(self):
        proc = subprocess.Popen(
            BRIDGE + ["--stub", "--tcp", "0"],
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            text=True,
        )
        try:
            line = proc.stderr.readline()
            assert line.startswith("listening on "), line
            port = int(line.split()[-1])
            with socket.create_connection(("127.0.0.1", port), timeout=10) as sock:
                reader = sock.makefile("r")
                sock.sendall((json.dumps(hello()) + "\n").encode())
                assert json.loads(reader.readline())["type"] == "ready"
                arr = np.full((6, 6, 3), 180, dtype=np.uint8)
                sock.sendall((json.dumps(score_request(5, arr)) + "\n").encode())
                msg = json.loads(reader.readline())
                assert msg["type"] == "result" and msg["id"] == 5
                reader.close()
        finally:
            proc.terminate()
            proc.wait(timeout=10)
