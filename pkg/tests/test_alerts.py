import json
import socket
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from accident_anticipation.alerts import (
    NO_OBJECTS_LINE,
    ChatClient,
    DeliveryError,
    InvolvedObject,
    MockClient,
    PromptBundle,
    RemoteError,
    SceneAnnotation,
    TransportError,
    alert_trigger,
    annotate,
    build_prompt,
    chat_payload,
    estimate_tta,
    mock_alert,
    request_alert,
)
from accident_anticipation.errors import ConfigurationError
from accident_anticipation.heads import LocalizationTrace, ScoreTrace

ANN = SceneAnnotation(
    clip_id="s11-00003",
    current_frame=60,
    accident_probability=0.8712,
    predicted_tta_seconds=1.5,
    involved_objects=(InvolvedObject(2, (0.1, 0.2, 0.16, 0.26), 0.93, "truck"),),
    threshold_used=0.5,
)

SNAPSHOT = """\
Scene s11-00003, frame 60.
Accident probability: 0.87
Predicted time to accident: 1.50 s
Alert threshold: 0.50
Involved objects:
- object slot 2 (truck): score 0.93, box [0.100, 0.200, 0.160, 0.260]"""


def test_prompt_snapshot():
    bundle = build_prompt(ANN)
    assert bundle.user_text == SNAPSHOT
    assert bundle.system_text.startswith("You are an in-vehicle safety assistant.")
    assert bundle.attachments is None


def test_prompt_fields():
    text = build_prompt(ANN).user_text
    assert "0.87" in text and "1.50 s" in text
    assert sum(line.startswith("- object slot") for line in text.splitlines()) == 1


def test_prompt_without_objects():
    ann = SceneAnnotation("c", 10, 0.6, 0.25)
    assert NO_OBJECTS_LINE in build_prompt(ann).user_text


def test_prompt_is_deterministic():
    assert build_prompt(ANN, attachments=b"\x00img") == build_prompt(ANN, attachments=b"\x00img")


def test_prompt_errors():
    with pytest.raises(ConfigurationError):
        build_prompt(ANN, "v9")
    with pytest.raises(ConfigurationError):
        SceneAnnotation("c", 1, 0.9, 1.0, (InvolvedObject(0, (0, 0, 1, 1), 0.4), InvolvedObject(1, (0, 0, 1, 1), 0.6)))


@settings(max_examples=50, deadline=None)
@given(
    a=st.tuples(st.integers(0, 99), st.integers(0, 500), st.integers(0, 18)),
    b=st.tuples(st.integers(0, 99), st.integers(0, 500), st.integers(0, 18)),
)
def test_prompt_is_injective(a, b):
    def render(p, t, slot):
        obj = InvolvedObject(slot, (0.1, 0.1, 0.2, 0.2), 0.9)
        return build_prompt(SceneAnnotation("c", 5, p / 100, t / 100, (obj,))).user_text

    assert (render(*a) == render(*b)) == (a == b)


# -- mock --------------------------------------------------------------------------


def test_mock_alert_names_object_and_tta():
    text = mock_alert(build_prompt(ANN))
    assert text == "Warning: possible accident in 1.50s involving object 2 (truck) (p=0.87)."
    assert mock_alert(build_prompt(ANN)) == text


def test_mock_alert_without_objects():
    text = MockClient().complete(build_prompt(SceneAnnotation("c", 10, 0.6, 0.25)))
    assert "no specific agent identified" in text and "0.25s" in text


def test_mock_pipeline_opens_no_sockets(monkeypatch):
    def forbidden(*args, **kwargs):
        raise AssertionError("network access attempted")

    monkeypatch.setattr(socket, "socket", forbidden)
    monkeypatch.setattr(socket, "create_connection", forbidden)
    assert request_alert(build_prompt(ANN), MockClient()).startswith("Warning:")


# -- chat client -----------------------------------------------------------------------


def _ok(content="Brake now."):
    return 200, json.dumps({"choices": [{"message": {"role": "assistant", "content": content}}]}).encode()


def test_retries_then_succeeds():
    calls = []

    def transport(url, body, headers, timeout):
        calls.append(timeout)
        if len(calls) <= 2:
            raise TransportError("connection refused")
        return _ok()

    delays = []
    client = ChatClient("http://x", transport=transport, sleep=delays.append)
    assert request_alert(build_prompt(ANN), client) == "Brake now."
    assert len(client.retry_log) == 2
    assert delays == [0.5, 1.0]
    assert calls == [10.0] * 3


def test_delivery_error_after_retries():
    def transport(*_):
        raise TransportError("timed out")

    client = ChatClient("http://x", retries=2, transport=transport, sleep=lambda _: None)
    with pytest.raises(DeliveryError):
        client.complete(build_prompt(ANN))
    assert len(client.retry_log) == 2


def test_remote_error_status_has_excerpt():
    client = ChatClient("http://x", transport=lambda *_: (503, b"overloaded"), sleep=lambda _: None)
    with pytest.raises(RemoteError, match="503: overloaded"):
        client.complete(build_prompt(ANN))


@pytest.mark.parametrize("body", [b"not json", b"{}", b'{"choices": []}', b'{"choices": [{"message": null}]}'])
def test_malformed_payload(body):
    client = ChatClient("http://x", transport=lambda *_: (200, body), sleep=lambda _: None)
    with pytest.raises(RemoteError):
        client.complete(build_prompt(ANN))


def test_payload_and_token(monkeypatch):
    seen = {}

    def transport(url, body, headers, timeout):
        seen.update(url=url, body=json.loads(body), headers=headers)
        return _ok()

    monkeypatch.setenv("ALERT_API_TOKEN", "sekrit")
    ChatClient("http://endpoint/v1/chat/completions", model="m1", max_tokens=64, transport=transport).complete(build_prompt(ANN))
    assert seen["body"] == chat_payload(build_prompt(ANN), "m1", 64)
    assert [m["role"] for m in seen["body"]["messages"]] == ["system", "user"]
    assert seen["headers"]["Authorization"] == "Bearer sekrit"
    monkeypatch.delenv("ALERT_API_TOKEN")
    ChatClient("http://x", transport=transport).complete(build_prompt(ANN))
    assert "Authorization" not in seen["headers"]


def test_urllib_transport_against_local_server():
    received = {}

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            n = int(self.headers["Content-Length"])
            received["body"] = json.loads(self.rfile.read(n))
            received["auth"] = self.headers.get("Authorization")
            status, raw = _ok("Stop.")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.end_headers()
            self.wfile.write(raw)

        def log_message(self, *args):
            pass

    server = HTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.handle_request)
    thread.start()
    try:
        url = f"http://127.0.0.1:{server.server_port}/v1/chat/completions"
        text = ChatClient(url, token="t0k", timeout=5).complete(build_prompt(ANN))
    finally:
        thread.join(5)
        server.server_close()
    assert text == "Stop."
    assert received["auth"] == "Bearer t0k"
    assert received["body"]["messages"][1]["content"] == SNAPSHOT


def test_unreachable_endpoint_is_delivery_error():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    client = ChatClient(f"http://127.0.0.1:{port}/", retries=1, timeout=1, sleep=lambda _: None)
    with pytest.raises(DeliveryError):
        client.complete(build_prompt(ANN))


# -- trigger and annotation -----------------------------------------------------------


def test_trigger_needs_persistence():
    s = [0.2, 0.7, 0.3, 0.6, 0.8, 0.9]
    assert alert_trigger(s, 0.5, 2) == 5
    assert alert_trigger(s, 0.5, 1) == 2
    assert alert_trigger([0.5, 0.5, 0.5], 0.5, 2) is None


def test_estimate_tta():
    assert estimate_tta(np.zeros(100), 60, 20, tau=90) == 1.5
    assert estimate_tta(np.zeros(100), 95, 20, tau=90) == 0.0
    ramp = np.linspace(0, 1, 101)[1:]  # slope 0.01 per frame
    assert estimate_tta(ramp, 50, 10) == pytest.approx(5.0)
    assert estimate_tta(np.full(30, 0.6), 10, 10) == 2.0


def test_annotate_keeps_only_involved_topk():
    s = np.array([0.1, 0.6, 0.7, 0.8])
    scores = np.tile([0.9, 0.3, 0.7, 0.8], (4, 1))
    mask = np.tile([True, True, True, False], (4, 1))
    loc = LocalizationTrace(scores, mask, k=3)
    boxes = np.tile(np.array([0.1, 0.1, 0.2, 0.2]), (4, 4, 1))
    ann = annotate("c", ScoreTrace(s, 0.8), loc, boxes, 10, 0.5, 2, tau=4, categories=["car", "bus", "van", "unknown"])
    assert ann.current_frame == 3 and ann.predicted_tta_seconds == pytest.approx(0.1)
    assert [(o.slot, o.category) for o in ann.involved_objects] == [(0, "car"), (2, "van")]
    before = scores.copy()
    build_prompt(ann)
    assert np.array_equal(loc.obj_scores, before)
    assert annotate("c", ScoreTrace(np.zeros(4), 0.0), loc, boxes, 10, 0.5) is None


def test_bundle_is_frozen():
    bundle = PromptBundle("a", "b")
    with pytest.raises(Exception):
        bundle.user_text = "c"
