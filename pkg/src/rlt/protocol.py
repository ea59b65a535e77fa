"""Console wire protocol: line-delimited JSON over a websocket.

Handshake message carries protocol version "rlt-hil/1". Outbound messages
are frames (pixels base64-quantized by default), periodic state summaries
and errors; inbound messages are intervene / teleop / label / handover.
Validation is shared by the server and the protocol-conformance tests.
"""
from __future__ import annotations

import base64
import json

import numpy as np

PROTOCOL_VERSION = "rlt-hil/1"

INBOUND_TYPES = ("intervene", "teleop", "label", "handover", "hello")


class ProtocolError(ValueError):
    pass


def encode_pixels(pixels: np.ndarray, exact: bool = False) -> dict:
    """u8 quantization for transport; exact f32 behind a debug flag."""
    if exact:
        data = np.ascontiguousarray(pixels, dtype="<f4").tobytes()
        return {"encoding": "f32", "data": base64.b64encode(data).decode("ascii")}
    q = np.clip(np.round(pixels * 255.0), 0, 255).astype(np.uint8)
    return {"encoding": "u8", "data": base64.b64encode(q.tobytes()).decode("ascii")}


def decode_pixels(msg: dict, shape=(24, 24)) -> np.ndarray:
    raw = base64.b64decode(msg["data"])
    if msg.get("encoding") == "f32":
        return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    return (np.frombuffer(raw, dtype=np.uint8).reshape(shape).astype(np.float32)) / 255.0


def hello_message(resume_token: str) -> dict:
    return {"type": "hello", "protocol": PROTOCOL_VERSION, "resume_token": resume_token}


def frame_message(episode: int, t: int, pixels: np.ndarray, proprio, source: str,
                  reward: float, exact_pixels: bool = False) -> dict:
    return {
        "type": "frame",
        "episode": int(episode),
        "t": int(t),
        "pixels": encode_pixels(pixels, exact=exact_pixels),
        "proprio": [float(v) for v in proprio],
        "source": source,
        "reward": float(reward),
    }


def state_message(phase: str, episode_count: int, buffer_size: int, metrics: dict) -> dict:
    return {
        "type": "state",
        "phase": phase,
        "episode_count": int(episode_count),
        "buffer_size": int(buffer_size),
        "metrics": metrics,
    }


def error_message(text: str) -> dict:
    return {"type": "error", "message": text}


def _require_number(msg: dict, key: str):
    v = msg.get(key)
    if not isinstance(v, (int, float)) or isinstance(v, bool):
        raise ProtocolError(f"{msg.get('type', '?')}.{key} must be a number, got {v!r}")
    return float(v)


def _require_bool(msg: dict, key: str):
    v = msg.get(key)
    if not isinstance(v, bool):
        raise ProtocolError(f"{msg.get('type', '?')}.{key} must be a boolean, got {v!r}")
    return v


def validate_inbound(msg) -> dict:
    """Check an inbound client message against the schema; raises
    ProtocolError with a reason on any malformation."""
    if not isinstance(msg, dict):
        raise ProtocolError("message must be a JSON object")
    mtype = msg.get("type")
    if mtype not in INBOUND_TYPES:
        raise ProtocolError(f"unknown message type {mtype!r}")
    if mtype == "intervene":
        _require_bool(msg, "active")
    elif mtype == "teleop":
        for key in ("dx", "dy", "dtheta"):
            v = _require_number(msg, key)
            if not -1.0 <= v <= 1.0:
                raise ProtocolError(f"teleop.{key} out of range [-1, 1]: {v}")
    elif mtype == "label":
        _require_bool(msg, "success")
    elif mtype == "hello":
        if msg.get("protocol") != PROTOCOL_VERSION:
            raise ProtocolError(
                f"protocol mismatch: client {msg.get('protocol')!r}, server {PROTOCOL_VERSION!r}"
            )
    return msg


def parse_inbound(raw: str) -> dict:
    try:
        msg = json.loads(raw)
    except json.JSONDecodeError as e:
        raise ProtocolError(f"malformed JSON: {e}") from e
    return validate_inbound(msg)


def dumps(msg: dict) -> str:
    return json.dumps(msg, separators=(",", ":"))
