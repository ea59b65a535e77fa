"""Interactive console transport and supervisor.

A minimal single-session RFC 6455 websocket server over the stdlib socket
module (the console is one operator on one run; no TLS, no multiplexing).
Inbound messages are validated, queued, and applied by the supervisor at
chunk boundaries only; malformed messages are answered with an error
message and never crash the run. A small blocking client is included for
headless use and the protocol round-trip tests.
"""
from __future__ import annotations

import base64
import hashlib
import json
import logging
import queue
import secrets
import socket
import struct
import threading
import time
from collections import deque

import numpy as np

from . import protocol, simenv
from .orchestrate import EpisodeTrace, Supervisor
from .replay import SOURCE_HUMAN, SOURCE_RL_ACTOR, SOURCE_VLA_WARMUP

log = logging.getLogger("rlt.serve")

_WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"

OP_TEXT = 0x1
OP_CLOSE = 0x8
OP_PING = 0x9
OP_PONG = 0xA


def _accept_key(client_key: str) -> str:
    digest = hashlib.sha1((client_key + _WS_GUID).encode("ascii")).digest()
    return base64.b64encode(digest).decode("ascii")


def _encode_frame(payload: bytes, opcode: int = OP_TEXT) -> bytes:
    head = bytes([0x80 | opcode])
    n = len(payload)
    if n < 126:
        head += bytes([n])
    elif n < 65536:
        head += bytes([126]) + struct.pack("!H", n)
    else:
        head += bytes([127]) + struct.pack("!Q", n)
    return head + payload


def _read_exact(sock: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("socket closed")
        buf += chunk
    return buf


def _read_frame(sock: socket.socket) -> tuple[int, bytes]:
    b0, b1 = _read_exact(sock, 2)
    opcode = b0 & 0x0F
    masked = bool(b1 & 0x80)
    length = b1 & 0x7F
    if length == 126:
        (length,) = struct.unpack("!H", _read_exact(sock, 2))
    elif length == 127:
        (length,) = struct.unpack("!Q", _read_exact(sock, 8))
    mask = _read_exact(sock, 4) if masked else b"\x00" * 4
    payload = bytearray(_read_exact(sock, length))
    if masked:
        for i in range(length):
            payload[i] ^= mask[i % 4]
    return opcode, bytes(payload)


class ConsoleServer:
    """Accepts one console session and exchanges line-delimited JSON."""

    def __init__(self, port: int = 8765, host: str = "127.0.0.1"):
        self.host = host
        self.requested_port = port
        self.port: int | None = None
        self.inbound: queue.Queue[dict] = queue.Queue()
        self.resume_token = secrets.token_hex(8)
        self._listener: socket.socket | None = None
        self._conn: socket.socket | None = None
        self._conn_lock = threading.Lock()
        self._threads: list[threading.Thread] = []
        self._stopping = threading.Event()

    # Lifecycle --------------------------------------------------------------

    def start(self):
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((self.host, self.requested_port))
        self._listener.listen(1)
        self.port = self._listener.getsockname()[1]
        t = threading.Thread(target=self._accept_loop, daemon=True, name="console-accept")
        t.start()
        self._threads.append(t)

    def stop(self):
        self._stopping.set()
        with self._conn_lock:
            if self._conn is not None:
                try:
                    self._conn.sendall(_encode_frame(b"", OP_CLOSE))
                    self._conn.close()
                except OSError:
                    pass
                self._conn = None
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
            self._listener = None

    def connected(self) -> bool:
        with self._conn_lock:
            return self._conn is not None

    def _accept_loop(self):
        while not self._stopping.is_set():
            try:
                conn, _addr = self._listener.accept()
            except OSError:
                return
            try:
                self._handshake(conn)
            except Exception as e:
                log.warning("handshake failed: %s", e)
                conn.close()
                continue
            with self._conn_lock:
                if self._conn is not None:
                    try:
                        self._conn.close()
                    except OSError:
                        pass
                self._conn = conn
            self.send(protocol.hello_message(self.resume_token))
            reader = threading.Thread(target=self._read_loop, args=(conn,), daemon=True,
                                      name="console-reader")
            reader.start()
            self._threads.append(reader)

    def _handshake(self, conn: socket.socket):
        request = b""
        while b"\r\n\r\n" not in request:
            chunk = conn.recv(4096)
            if not chunk:
                raise ConnectionError("client closed during handshake")
            request += chunk
        key = None
        for line in request.decode("latin-1").split("\r\n"):
            if line.lower().startswith("sec-websocket-key:"):
                key = line.split(":", 1)[1].strip()
        if key is None:
            raise ProtocolHandshakeError("missing Sec-WebSocket-Key")
        response = (
            "HTTP/1.1 101 Switching Protocols\r\n"
            "Upgrade: websocket\r\n"
            "Connection: Upgrade\r\n"
            f"Sec-WebSocket-Accept: {_accept_key(key)}\r\n\r\n"
        )
        conn.sendall(response.encode("latin-1"))

    def _read_loop(self, conn: socket.socket):
        buffer = ""
        while not self._stopping.is_set():
            try:
                opcode, payload = _read_frame(conn)
            except (ConnectionError, OSError):
                break
            if opcode == OP_CLOSE:
                try:
                    conn.sendall(_encode_frame(payload, OP_CLOSE))
                except OSError:
                    pass
                break
            if opcode == OP_PING:
                try:
                    conn.sendall(_encode_frame(payload, OP_PONG))
                except OSError:
                    pass
                continue
            if opcode != OP_TEXT:
                continue
            buffer += payload.decode("utf-8", errors="replace")
            # Line-delimited JSON: one message per line; a frame without a
            # trailing newline is a complete single message.
            *lines, rest = buffer.split("\n")
            if rest.strip():
                lines.append(rest.strip())
                buffer = ""
            else:
                buffer = ""
            for line in lines:
                line = line.strip()
                if not line:
                    continue
                try:
                    msg = protocol.parse_inbound(line)
                except protocol.ProtocolError as e:
                    log.warning("rejected message: %s", e)
                    self.send(protocol.error_message(str(e)))
                    continue
                self.inbound.put(msg)
        with self._conn_lock:
            if self._conn is conn:
                self._conn = None

    # IO ----------------------------------------------------------------------

    def send(self, msg: dict):
        data = (protocol.dumps(msg) + "\n").encode("utf-8")
        with self._conn_lock:
            if self._conn is None:
                return
            try:
                self._conn.sendall(_encode_frame(data))
            except OSError:
                self._conn = None

    def drain(self) -> list[dict]:
        out = []
        while True:
            try:
                out.append(self.inbound.get_nowait())
            except queue.Empty:
                return out

    def wait_message(self, want_type: str, timeout: float | None = None) -> dict | None:
        """Block until a message of want_type arrives; other messages are
        handled by the caller via the returned rejects."""
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            remaining = None if deadline is None else max(0.0, deadline - time.monotonic())
            try:
                msg = self.inbound.get(timeout=remaining if remaining is not None else 0.5)
            except queue.Empty:
                if deadline is not None and time.monotonic() >= deadline:
                    return None
                continue
            if msg["type"] == want_type:
                return msg
            self.send(protocol.error_message(f"unexpected {msg['type']} while awaiting {want_type}"))


class ProtocolHandshakeError(RuntimeError):
    pass


_SOURCE_TAGS = {SOURCE_VLA_WARMUP: "vla", SOURCE_RL_ACTOR: "rl", SOURCE_HUMAN: "human"}


class InteractiveSupervisor(Supervisor):
    """Console-driven supervisor: teleop overrides, handover and labels.

    Inbound messages take effect at chunk boundaries; per-step teleop inputs
    are buffered and consumed as the executed chunk at the next boundary.
    Episode ends pause the run until a label message arrives (no timeout).
    """

    kind = "interactive"

    def __init__(self, server: ConsoleServer, exact_pixels: bool = False):
        self.server = server
        self.exact_pixels = exact_pixels
        self.intervene_active = False
        self.handover_requested = False
        self.teleop_buffer: deque[tuple[float, float, float]] = deque(maxlen=256)
        self.episode_count = 0
        self.buffer_size = 0
        self._labeled_current = False

    def _apply(self, msg: dict):
        mtype = msg["type"]
        if mtype == "intervene":
            self.intervene_active = bool(msg["active"])
            if not self.intervene_active:
                self.teleop_buffer.clear()
        elif mtype == "teleop":
            if not self.intervene_active:
                self.server.send(protocol.error_message("teleop ignored: intervention not active"))
                return
            self.teleop_buffer.append(
                (float(np.clip(msg["dx"], -1, 1)), float(np.clip(msg["dy"], -1, 1)),
                 float(np.clip(msg["dtheta"], -1, 1)))
            )
        elif mtype == "handover":
            self.handover_requested = True
        elif mtype == "label":
            self.server.send(protocol.error_message("label rejected: no episode awaiting a label"))
        # hello is connection bookkeeping only

    def _drain(self):
        for msg in self.server.drain():
            self._apply(msg)

    def decide_intervention(self, episode_idx, chunk_idx, state, rng) -> bool:
        self._drain()
        return self.intervene_active

    def decide_handover(self, state) -> bool:
        self._drain()
        return self.handover_requested

    def intervention_chunk(self, state, chunk_len: int) -> np.ndarray:
        chunk = np.zeros((chunk_len, 3), dtype=np.float32)
        recent = list(self.teleop_buffer)[-chunk_len:]
        for i in range(chunk_len):
            if i < len(recent):
                chunk[i] = recent[i]
            elif recent:
                chunk[i] = recent[-1]  # hold the last commanded axes
        self.teleop_buffer.clear()
        return chunk

    def label_episode(self, state, trace_rewards) -> bool:
        self.server.send(
            protocol.state_message(
                "awaiting_label", self.episode_count, self.buffer_size,
                {"env_success": bool(state.success)},
            )
        )
        self._labeled_current = False
        msg = self.server.wait_message("label", timeout=None)
        self._labeled_current = True
        success = bool(msg["success"])
        self.server.send(
            protocol.state_message(
                "label_committed", self.episode_count, self.buffer_size,
                {"reward": 1.0 if success else 0.0},
            )
        )
        return success

    def on_step(self, episode_idx, t, obs, action, source, reward):
        self.server.send(
            protocol.frame_message(
                episode_idx, t, obs.pixels, obs.proprio, _SOURCE_TAGS[int(source)],
                reward, exact_pixels=self.exact_pixels,
            )
        )

    def on_stored(self, buffer_size: int):
        self.buffer_size = buffer_size

    def on_episode_end(self, episode_idx, trace: EpisodeTrace):
        self.episode_count = episode_idx + 1
        self.handover_requested = False
        self.server.send(
            protocol.state_message(
                "episode_end", self.episode_count, self.buffer_size,
                {"label": bool(trace.label), "steps": int(trace.length)},
            )
        )


class ConsoleClient:
    """Minimal blocking websocket client for tests and headless drivers."""

    def __init__(self, host: str, port: int, timeout: float = 10.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        key = base64.b64encode(secrets.token_bytes(16)).decode("ascii")
        request = (
            f"GET / HTTP/1.1\r\nHost: {host}:{port}\r\nUpgrade: websocket\r\n"
            f"Connection: Upgrade\r\nSec-WebSocket-Key: {key}\r\n"
            "Sec-WebSocket-Version: 13\r\n\r\n"
        )
        self.sock.sendall(request.encode("latin-1"))
        # Read the HTTP response byte-by-byte: over-reading would swallow
        # websocket frames that arrive in the same segment.
        response = b""
        while not response.endswith(b"\r\n\r\n"):
            chunk = self.sock.recv(1)
            if not chunk:
                raise ConnectionError("server closed during handshake")
            response += chunk
        status = response.split(b"\r\n", 1)[0]
        if b"101" not in status:
            raise ProtocolHandshakeError(f"unexpected handshake response: {status!r}")
        expected = _accept_key(key).encode("ascii")
        if expected not in response:
            raise ProtocolHandshakeError("Sec-WebSocket-Accept mismatch")
        self._recv_buffer = ""

    def send(self, msg: dict):
        payload = (json.dumps(msg) + "\n").encode("utf-8")
        masked = bytearray(payload)
        mask = secrets.token_bytes(4)
        for i in range(len(masked)):
            masked[i] ^= mask[i % 4]
        n = len(payload)
        head = bytes([0x80 | OP_TEXT])
        if n < 126:
            head += bytes([0x80 | n])
        elif n < 65536:
            head += bytes([0x80 | 126]) + struct.pack("!H", n)
        else:
            head += bytes([0x80 | 127]) + struct.pack("!Q", n)
        self.sock.sendall(head + mask + bytes(masked))

    def send_raw_text(self, text: str):
        payload = text.encode("utf-8")
        masked = bytearray(payload)
        mask = secrets.token_bytes(4)
        for i in range(len(masked)):
            masked[i] ^= mask[i % 4]
        head = bytes([0x80 | OP_TEXT, 0x80 | len(payload)]) if len(payload) < 126 else None
        if head is None:
            head = bytes([0x80 | OP_TEXT, 0x80 | 126]) + struct.pack("!H", len(payload))
        self.sock.sendall(head + mask + bytes(masked))

    def recv(self, timeout: float = 10.0) -> dict:
        self.sock.settimeout(timeout)
        while True:
            if "\n" in self._recv_buffer:
                line, self._recv_buffer = self._recv_buffer.split("\n", 1)
                if line.strip():
                    return json.loads(line)
                continue
            opcode, payload = _read_frame(self.sock)
            if opcode == OP_CLOSE:
                raise ConnectionError("server closed")
            if opcode == OP_PING:
                self.sock.sendall(_encode_frame(payload, OP_PONG))
                continue
            if opcode == OP_TEXT:
                self._recv_buffer += payload.decode("utf-8")

    def recv_until(self, mtype: str, timeout: float = 30.0, limit: int = 100000) -> dict:
        deadline = time.monotonic() + timeout
        for _ in range(limit):
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise TimeoutError(f"no {mtype!r} message within {timeout}s")
            msg = self.recv(timeout=remaining)
            if msg.get("type") == mtype:
                return msg
        raise TimeoutError(f"no {mtype!r} message within {limit} messages")

    def close(self):
        try:
            self.sock.sendall(_encode_frame(b"", OP_CLOSE))
        except OSError:
            pass
        self.sock.close()
