from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest
import requests
from PIL import Image

from sap_adapters.bridge import (
    MllmBridge,
    ScriptedResponder,
    UpstreamResponder,
    extract_query_text,
    parse_mock_spec,
)
from sap_adapters.fileio import AdapterError

INSTRUCTION = (
    'Instruction: For the text description: "a man in a red jacket", order the images '
    "based on how accurately they reflect the overall context in the text, starting "
    "with the most faithful match. Please output only a Python list format like this: "
    "[4, 2, 8, 1, 5, 3, 6, 9, 10, 7, ..., 2]."
)


def wire_body(uris=("file:///g/a.png", "file:///g/b.png"), overlay=None):
    content = []
    for i, uri in enumerate(uris, start=1):
        content.append({"type": "text", "text": f"Image-{i}: <image>"})
        part = {"type": "image", "uri": uri}
        if overlay:
            part["overlay"] = overlay
        content.append(part)
    content.append({"type": "text", "text": INSTRUCTION})
    return {"model": "m", "max_tokens": 128, "temperature": 0,
            "messages": [{"role": "user", "content": content}]}


class FakeUpstream:
    """Chat-completions endpoint that records request bodies."""

    def __init__(self, status=200, content="[2, 1]"):
        self.bodies = []
        self.status = status
        self.content = content
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", "0"))
                outer.bodies.append(json.loads(self.rfile.read(length)))
                payload = json.dumps(
                    {"choices": [{"message": {"content": outer.content}}]}
                ).encode()
                self.send_response(outer.status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

            def log_message(self, fmt, *args):
                pass

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.httpd.server_address[1]}/v1/chat/completions"

    def __enter__(self):
        threading.Thread(target=self.httpd.serve_forever, daemon=True).start()
        return self

    def __exit__(self, *exc):
        self.httpd.shutdown()
        self.httpd.server_close()


class TestScripted:
    def test_lookup_by_query_text(self):
        responder = ScriptedResponder({"a man in a red jacket": "[2, 1]"})
        body = wire_body()
        assert responder.respond(body["messages"][0]["content"]) == "[2, 1]"

    def test_extract_query_text(self):
        assert extract_query_text(wire_body()["messages"][0]["content"]) == "a man in a red jacket"

    def test_default_star(self):
        responder = ScriptedResponder({"*": "fallback"})
        assert responder.respond(wire_body()["messages"][0]["content"]) == "fallback"

    def test_missing_raises(self):
        with pytest.raises(AdapterError, match="no scripted response"):
            ScriptedResponder({}).respond(wire_body()["messages"][0]["content"])

    def test_parse_mock_spec(self, tmp_path):
        path = tmp_path / "script.json"
        path.write_text(json.dumps({"*": "x"}))
        assert parse_mock_spec(f"scripted:{path}").table == {"*": "x"}
        with pytest.raises(AdapterError, match="unknown mock spec"):
            parse_mock_spec("replay")


class TestBridgeScripted:
    def test_replay_byte_identical(self):
        with MllmBridge(scripted=ScriptedResponder({"a man in a red jacket": "[2, 1]"})) as bridge:
            first = requests.post(bridge.url, json=wire_body(), timeout=5)
            second = requests.post(bridge.url, json=wire_body(), timeout=5)
        assert first.status_code == second.status_code == 200
        assert first.content == second.content
        assert first.json()["text"] == "[2, 1]"

    def test_malformed_body_400(self):
        with MllmBridge(scripted=ScriptedResponder({"*": "x"})) as bridge:
            response = requests.post(bridge.url, json={"messages": []}, timeout=5)
        assert response.status_code == 400

    def test_unscripted_query_502(self):
        with MllmBridge(scripted=ScriptedResponder({})) as bridge:
            response = requests.post(bridge.url, json=wire_body(), timeout=5)
        assert response.status_code == 502


class TestBridgeUpstream:
    def test_translation_and_decoding_pinned(self, tmp_path):
        src = tmp_path / "scene.png"
        Image.new("RGB", (40, 40), (30, 30, 30)).save(src)
        overlay = {"shape": "rectangle", "color": "red", "bbox": [5, 5, 10, 10], "stroke_px": 4}
        with FakeUpstream() as upstream:
            responder = UpstreamResponder(
                upstream.url, "internvl-8b", spool_dir=tmp_path / "spool", image_base=tmp_path
            )
            with MllmBridge(upstream=responder) as bridge:
                response = requests.post(
                    bridge.url,
                    json=wire_body(uris=(src.as_uri(),), overlay=overlay),
                    timeout=5,
                )
        assert response.status_code == 200
        assert response.json()["text"] == "[2, 1]"
        (body,) = upstream.bodies
        assert body["model"] == "internvl-8b"
        assert body["temperature"] == 0
        assert body["max_tokens"] == 128
        parts = body["messages"][0]["content"]
        image_parts = [p for p in parts if p["type"] == "image_url"]
        assert len(image_parts) == 1
        # the overlay was rasterized into a spooled file, not passed through
        spooled = image_parts[0]["image_url"]["url"]
        assert spooled != src.as_uri() and "overlay-" in spooled
        text_parts = [p["text"] for p in parts if p["type"] == "text"]
        assert text_parts[-1] == INSTRUCTION

    def test_upstream_500_becomes_502(self, tmp_path):
        with FakeUpstream(status=500) as upstream:
            responder = UpstreamResponder(upstream.url, "m", spool_dir=tmp_path)
            with MllmBridge(upstream=responder) as bridge:
                response = requests.post(bridge.url, json=wire_body(), timeout=5)
        assert response.status_code == 502
        assert "HTTP 500" in response.json()["error"]

    def test_unreachable_upstream_502(self, tmp_path):
        responder = UpstreamResponder("http://127.0.0.1:9/nope", "m", spool_dir=tmp_path, timeout=0.3)
        with MllmBridge(upstream=responder) as bridge:
            response = requests.post(bridge.url, json=wire_body(), timeout=5)
        assert response.status_code == 502


class TestBridgeConstruction:
    def test_needs_some_mode(self):
        with pytest.raises(AdapterError, match="scripted table or an upstream"):
            MllmBridge()
