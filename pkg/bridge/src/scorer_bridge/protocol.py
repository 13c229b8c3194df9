"""Version-1 wire schema: message builders, parsing, validation.

One JSON object per line, UTF-8.  The client opens with a hello; the
server answers ready or error.  Each score request is answered by
exactly one result or error carrying the same id.
"""

from __future__ import annotations

import base64
import io
import json

import numpy as np
from PIL import Image as PILImage

PROTOCOL_VERSION = 1
KNOWN_TASKS = ("detection", "segmentation")


class BridgeProtocolError(ValueError):
    """A message violates the wire schema."""


def parse_line(line: str) -> dict:
    try:
        msg = json.loads(line)
    except json.JSONDecodeError as exc:
        raise BridgeProtocolError(f"not a JSON line: {line[:80]!r}") from exc
    if not isinstance(msg, dict) or not isinstance(msg.get("type"), str):
        raise BridgeProtocolError(f"message without a type: {line[:80]!r}")
    return msg


def ready_message(tasks) -> dict:
    return {"type": "ready", "tasks": list(tasks)}


def error_message(request_id: int, text: str) -> dict:
    return {"type": "error", "id": int(request_id), "message": str(text)}


def result_message(request_id, scores, detections=None, mask_path=None, timing_ms=0.0) -> dict:
    msg = {
        "type": "result",
        "id": int(request_id),
        "scores": {str(k): float(v) for k, v in scores.items()},
        "timing_ms": float(timing_ms),
    }
    if detections is not None:
        msg["detections"] = [
            {"cls": int(d["cls"]), "box": [float(c) for c in d["box"]], "conf": float(d["conf"])}
            for d in detections
        ]
    if mask_path is not None:
        msg["mask_path"] = str(mask_path)
    return msg


def serialize(msg: dict) -> str:
    return json.dumps(msg, sort_keys=True)


def decode_image(payload: dict) -> np.ndarray:
    """Decode a request image payload to float RGB in [0, 1], (H, W, 3)."""
    if not isinstance(payload, dict):
        raise BridgeProtocolError("image payload must be an object")
    encoding = payload.get("encoding")
    if encoding == "png-base64":
        try:
            raw = base64.b64decode(payload["data"], validate=True)
        except (KeyError, ValueError) as exc:
            raise BridgeProtocolError(f"bad base64 image data: {exc}") from exc
        pil = PILImage.open(io.BytesIO(raw))
    elif encoding == "path":
        try:
            pil = PILImage.open(payload["data"])
        except (KeyError, OSError) as exc:
            raise BridgeProtocolError(f"cannot open image path: {exc}") from exc
    else:
        raise BridgeProtocolError(f"unknown image encoding {encoding!r}")

    pil.load()
    if pil.mode in ("I;16", "I"):
        arr = np.asarray(pil, dtype=np.float64) / 65535.0
    else:
        pil = pil.convert("RGB") if pil.mode not in ("L", "RGB") else pil
        arr = np.asarray(pil, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return np.clip(arr, 0.0, 1.0)


def validate_request(msg: dict) -> None:
    kind = msg["type"]
    if kind == "hello":
        if not isinstance(msg.get("version"), int):
            raise BridgeProtocolError("hello without an integer version")
        if not isinstance(msg.get("tasks"), list):
            raise BridgeProtocolError("hello without a task list")
    elif kind == "score":
        if not isinstance(msg.get("id"), int) or msg["id"] < 0:
            raise BridgeProtocolError("score request without a nonnegative integer id")
        if "image" not in msg:
            raise BridgeProtocolError("score request without an image")
        if not isinstance(msg.get("tasks"), list):
            raise BridgeProtocolError("score request without a task list")
    else:
        raise BridgeProtocolError(f"unsupported message type {kind!r}")


def validate_response(msg: dict) -> None:
    """Schema check used by conformance tests."""
    kind = msg.get("type")
    if kind == "ready":
        if not isinstance(msg.get("tasks"), list):
            raise BridgeProtocolError("ready without tasks")
    elif kind == "result":
        if not isinstance(msg.get("id"), int):
            raise BridgeProtocolError("result without id")
        scores = msg.get("scores")
        if not isinstance(scores, dict) or not all(
            isinstance(v, (int, float)) for v in scores.values()
        ):
            raise BridgeProtocolError("result without numeric scores")
        if "detections" in msg:
            for d in msg["detections"]:
                if not (isinstance(d.get("cls"), int) and len(d.get("box", ())) == 4):
                    raise BridgeProtocolError(f"malformed detection {d!r}")
                if not (0.0 <= float(d.get("conf", -1)) <= 1.0):
                    raise BridgeProtocolError(f"detection confidence outside [0,1]: {d!r}")
    elif kind == "error":
        if not isinstance(msg.get("id"), int) or not isinstance(msg.get("message"), str):
            raise BridgeProtocolError("error without id and message")
    else:
        raise BridgeProtocolError(f"unknown response type {kind!r}")
