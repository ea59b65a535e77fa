"""Console protocol tests: schema validation and a live server round-trip."""
import threading
import time

import numpy as np
import pytest

from rlt import protocol
from rlt.protocol import ProtocolError, parse_inbound, validate_inbound
from rlt.serve import ConsoleClient, ConsoleServer, InteractiveSupervisor


# Schema validation -----------------------------------------------------------

def test_valid_inbound_messages():
    validate_inbound({"type": "intervene", "active": True})
    validate_inbound({"type": "teleop", "dx": 0.5, "dy": -1.0, "dtheta": 0.0})
    validate_inbound({"type": "label", "success": False})
    validate_inbound({"type": "handover"})
    validate_inbound({"type": "hello", "protocol": protocol.PROTOCOL_VERSION})


@pytest.mark.parametrize(
    "msg",
    [
        {"type": "teleport"},
        {"type": "teleop", "dx": "left", "dy": 0, "dtheta": 0},
        {"type": "teleop", "dx": 2.0, "dy": 0, "dtheta": 0},
        {"type": "teleop", "dx": 0.1, "dy": 0.2},
        {"type": "intervene", "active": "yes"},
        {"type": "label", "success": 1},
        {"type": "hello", "protocol": "rlt-hil/0"},
        [1, 2, 3],
    ],
    ids=["unknown-type", "teleop-string", "teleop-range", "teleop-missing",
         "intervene-nonbool", "label-nonbool", "hello-version", "non-object"],
)
def test_malformed_inbound_rejected(msg):
    with pytest.raises(ProtocolError):
        validate_inbound(msg)


def test_parse_inbound_bad_json():
    with pytest.raises(ProtocolError):
        parse_inbound("{nope")


def test_pixel_codec_roundtrip():
    rng = np.random.default_rng(0)
    img = rng.random((24, 24)).astype(np.float32)
    enc = protocol.encode_pixels(img)
    dec = protocol.decode_pixels(enc)
    assert dec.shape == (24, 24)
    assert np.abs(dec - img).max() <= 1.0 / 255.0 + 1e-6
    exact = protocol.decode_pixels(protocol.encode_pixels(img, exact=True))
    np.testing.assert_array_equal(exact, img)


# Live server round-trips -----------------------------------------------------

@pytest.fixture()
def server():
    srv = ConsoleServer(port=0)
    srv.start()
    yield srv
    srv.stop()


def _connect(server):
    client = ConsoleClient("127.0.0.1", server.port)
    hello = client.recv_until("hello")
    assert hello["protocol"] == protocol.PROTOCOL_VERSION
    assert hello["resume_token"] == server.resume_token
    return client


def test_handshake_and_hello(server):
    client = _connect(server)
    client.close()


def test_inbound_validated_and_queued(server):
    client = _connect(server)
    client.send({"type": "intervene", "active": True})
    client.send({"type": "teleop", "dx": 1.0, "dy": 0.0, "dtheta": 0.0})
    deadline = time.monotonic() + 5
    msgs = []
    while len(msgs) < 2 and time.monotonic() < deadline:
        msgs.extend(server.drain())
        time.sleep(0.01)
    assert [m["type"] for m in msgs] == ["intervene", "teleop"]
    client.close()


def test_malformed_message_answered_with_error_not_crash(server):
    client = _connect(server)
    client.send_raw_text("this is not json")
    err = client.recv_until("error")
    assert "JSON" in err["message"] or "malformed" in err["message"].lower()
    client.send({"type": "teleop", "dx": 5.0, "dy": 0.0, "dtheta": 0.0})
    err2 = client.recv_until("error")
    assert "range" in err2["message"]
    # the server is still alive and functional
    client.send({"type": "handover"})
    deadline = time.monotonic() + 5
    got = []
    while not got and time.monotonic() < deadline:
        got = [m for m in server.drain() if m["type"] == "handover"]
        time.sleep(0.01)
    assert got
    client.close()


def test_supervisor_teleop_requires_intervene(server):
    sup = InteractiveSupervisor(server)
    client = _connect(server)
    client.send({"type": "teleop", "dx": 0.5, "dy": 0.0, "dtheta": 0.0})
    time.sleep(0.2)
    assert sup.decide_intervention(0, 0, None, None) is False
    err = client.recv_until("error")
    assert "intervention not active" in err["message"]
    client.close()


def test_supervisor_intervention_chunk_from_teleop_buffer(server):
    sup = InteractiveSupervisor(server)
    client = _connect(server)
    client.send({"type": "intervene", "active": True})
    for v in (0.25, 0.5, 0.75):
        client.send({"type": "teleop", "dx": v, "dy": -v, "dtheta": 0.0})
    deadline = time.monotonic() + 5
    while not sup.intervene_active and time.monotonic() < deadline:
        sup.decide_intervention(0, 0, None, None)
        time.sleep(0.02)
    assert sup.intervene_active
    deadline = time.monotonic() + 5
    while len(sup.teleop_buffer) < 3 and time.monotonic() < deadline:
        sup.decide_intervention(0, 0, None, None)
        time.sleep(0.02)
    chunk = sup.intervention_chunk(None, 5)
    assert chunk.shape == (5, 3)
    np.testing.assert_allclose(chunk[0], [0.25, -0.25, 0.0])
    np.testing.assert_allclose(chunk[2], [0.75, -0.75, 0.0])
    np.testing.assert_allclose(chunk[4], [0.75, -0.75, 0.0])  # held last axes
    client.close()


def test_label_outside_episode_rejected(server):
    sup = InteractiveSupervisor(server)
    client = _connect(server)
    client.send({"type": "label", "success": True})
    time.sleep(0.2)
    sup.decide_intervention(0, 0, None, None)  # drains and answers
    err = client.recv_until("error")
    assert "label" in err["message"]
    client.close()


def test_label_blocks_until_provided(server):
    sup = InteractiveSupervisor(server)
    client = _connect(server)

    class FakeState:
        success = True

    result = {}

    def worker():
        result["label"] = sup.label_episode(FakeState(), np.zeros(4))

    t = threading.Thread(target=worker, daemon=True)
    t.start()
    awaiting = client.recv_until("state")
    assert awaiting["phase"] == "awaiting_label"
    time.sleep(0.2)
    assert "label" not in result  # still paused without a label
    client.send({"type": "label", "success": True})
    t.join(timeout=5)
    assert result.get("label") is True
    committed = client.recv_until("state")
    assert committed["phase"] == "label_committed"
    assert committed["metrics"]["reward"] == 1.0
    client.close()


def test_frame_messages_stream(server):
    sup = InteractiveSupervisor(server)
    client = _connect(server)
    from rlt.simenv import EpisodeConfig, reset

    _, obs = reset(EpisodeConfig(seed=0))
    sup.on_step(0, 3, obs, np.zeros(3), 1, 0.0)
    frame = client.recv_until("frame")
    assert frame["t"] == 3
    assert frame["source"] == "rl"
    assert len(frame["proprio"]) == 6
    dec = protocol.decode_pixels(frame["pixels"])
    assert dec.shape == (24, 24)
    client.close()
