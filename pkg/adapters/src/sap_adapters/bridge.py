"""The MLLM bridge: a loopback service speaking the engine's ranker wire
contract and translating it to a concrete chat-completions style API.

Decoding is pinned deterministic on the way upstream (temperature 0,
max_tokens 128) regardless of what the caller sent. A scripted mode replays
canned responses byte for byte so the engine's tests run with no model at
all. Upstream failures surface as contract-level errors (non-200), which the
engine downgrades to its coarse-order fallback.
"""

from __future__ import annotations

import json
import tempfile
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Mapping

import requests

from .fileio import AdapterError, resolve_uri
from .overlay import render_overlay_file

UPSTREAM_MAX_TOKENS = 128
_QUERY_PREFIX = 'Instruction: For the text description: "'
_QUERY_SUFFIX = '", order the images based on how accurately'


def extract_query_text(content: list[dict]) -> str | None:
    """Pull the description T out of the instruction text part, if any."""
    for part in reversed(content):
        if part.get("type") == "text":
            text = part.get("text", "")
            start = text.find(_QUERY_PREFIX)
            end = text.rfind(_QUERY_SUFFIX)
            if start >= 0 and end > start:
                return text[start + len(_QUERY_PREFIX) : end]
    return None


class ScriptedResponder:
    """Replays canned responses keyed by query text (or full prompt text);
    `*` is the catch-all."""

    def __init__(self, table: Mapping[str, str]) -> None:
        self.table = dict(table)

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedResponder":
        with open(path, encoding="utf-8") as fh:
            table = json.load(fh)
        if not isinstance(table, dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in table.items()
        ):
            raise AdapterError(f"script file {path} must map prompt/query text to response text")
        return cls(table)

    def respond(self, content: list[dict]) -> str:
        query = extract_query_text(content)
        if query is not None and query in self.table:
            return self.table[query]
        full_text = "\n".join(p.get("text", "") for p in content if p.get("type") == "text")
        if full_text in self.table:
            return self.table[full_text]
        if "*" in self.table:
            return self.table["*"]
        raise AdapterError(f"no scripted response for query {query!r}")


class UpstreamResponder:
    """Translates wire-contract requests to an OpenAI-style chat completions
    endpoint, rasterizing overlay instructions into real pixels first."""

    def __init__(
        self,
        upstream_url: str,
        model: str,
        *,
        timeout: float = 120.0,
        spool_dir: str | Path | None = None,
        image_base: str | Path | None = None,
    ) -> None:
        self.upstream_url = upstream_url
        self.model = model
        self.timeout = timeout
        self.spool_dir = Path(spool_dir) if spool_dir else Path(tempfile.mkdtemp(prefix="sap-overlay-"))
        self.image_base = image_base
        self._spool_count = 0
        self._lock = threading.Lock()

    def _materialize(self, part: dict) -> str:
        """Resolve the image uri; burn in the overlay when one is attached."""
        overlay = part.get("overlay")
        if not overlay:
            return part["uri"]
        with self._lock:
            self._spool_count += 1
            out = self.spool_dir / f"overlay-{self._spool_count:06d}.png"
        source = resolve_uri(part["uri"], self.image_base)
        render_overlay_file(
            source,
            tuple(overlay["bbox"]),
            out,
            stroke_px=int(overlay.get("stroke_px", 4)),
        )
        return out.resolve().as_uri()

    def respond(self, content: list[dict], requested_model: str) -> str:
        upstream_content = []
        for part in content:
            if part.get("type") == "text":
                upstream_content.append({"type": "text", "text": part["text"]})
            elif part.get("type") == "image":
                upstream_content.append(
                    {"type": "image_url", "image_url": {"url": self._materialize(part)}}
                )
            else:
                raise AdapterError(f"unknown content part type {part.get('type')!r}")
        body = {
            "model": self.model or requested_model,
            "max_tokens": UPSTREAM_MAX_TOKENS,
            "temperature": 0,
            "messages": [{"role": "user", "content": upstream_content}],
        }
        try:
            response = requests.post(self.upstream_url, json=body, timeout=self.timeout)
        except requests.RequestException as exc:
            raise AdapterError(f"upstream request failed: {exc}") from exc
        if response.status_code != 200:
            raise AdapterError(f"upstream returned HTTP {response.status_code}")
        try:
            return response.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError):
            raise AdapterError("upstream response not in chat-completions shape") from None


class _BridgeHandler(BaseHTTPRequestHandler):
    def do_POST(self) -> None:  # noqa: N802 (http.server API)
        bridge: MllmBridge = self.server.owner  # type: ignore[attr-defined]
        try:
            length = int(self.headers.get("Content-Length", "0"))
            body = json.loads(self.rfile.read(length))
            content = body["messages"][0]["content"]
            if not isinstance(content, list):
                raise AdapterError("messages[0].content must be a list of parts")
        except (ValueError, KeyError, IndexError, TypeError, AdapterError) as exc:
            self._reply(400, {"error": f"malformed wire request: {exc}"})
            return
        try:
            if bridge.scripted is not None:
                text = bridge.scripted.respond(content)
            else:
                text = bridge.upstream.respond(content, body.get("model", ""))
        except AdapterError as exc:
            self._reply(502, {"error": str(exc)})
            return
        bridge.requests_served += 1
        self._reply(200, {"text": text})

    def _reply(self, status: int, payload: dict) -> None:
        data = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, fmt: str, *args: object) -> None:
        pass


class MllmBridge:
    """Long-running loopback service; scripted mode wins when both are given."""

    def __init__(
        self,
        *,
        scripted: ScriptedResponder | None = None,
        upstream: UpstreamResponder | None = None,
        host: str = "127.0.0.1",
        port: int = 0,
    ) -> None:
        if scripted is None and upstream is None:
            raise AdapterError("bridge needs a scripted table or an upstream endpoint")
        self.scripted = scripted
        self.upstream = upstream
        self.requests_served = 0
        self._httpd = ThreadingHTTPServer((host, port), _BridgeHandler)
        self._httpd.owner = self  # type: ignore[attr-defined]
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}/v1/rank"

    def start(self) -> "MllmBridge":
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self) -> "MllmBridge":
        return self.start()

    def __exit__(self, *exc: object) -> None:
        self.stop()


def parse_mock_spec(spec: str) -> ScriptedResponder:
    """Parse `scripted:<path>` into a responder."""
    kind, _, arg = spec.partition(":")
    if kind != "scripted" or not arg:
        raise AdapterError(f"unknown mock spec {spec!r} (expected scripted:<path>)")
    return ScriptedResponder.from_file(arg)
