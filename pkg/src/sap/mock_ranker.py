"""Deterministic mock rankers: in-process clients plus a loopback HTTP server
implementing the ranker wire contract.

These stand in for the real vision-language endpoint in tests and benchmarks.
The scripted and oracle modes are pure functions of the prompt, so whole-run
results are reproducible byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import random
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Mapping, Sequence

from .gallery import Bbox, Gallery
from .ranker import (
    Attachment,
    Overlay,
    PromptBundle,
    PromptVariant,
    RankerError,
)

_QUERY_PREFIX = 'Instruction: For the text description: "'
_QUERY_SUFFIX = '", order the images based on how accurately'


def extract_query_text(bundle: PromptBundle) -> str:
    """Recover the description T from a built prompt's instruction block."""
    instruction = bundle.text_blocks[-1] if bundle.text_blocks else ""
    start = instruction.find(_QUERY_PREFIX)
    end = instruction.rfind(_QUERY_SUFFIX)
    if start < 0 or end < 0 or end < start:
        raise RankerError("prompt has no instruction block to extract the query from")
    return instruction[start + len(_QUERY_PREFIX) : end]


def render_ranking(order: Sequence[int]) -> str:
    return "[" + ", ".join(str(v) for v in order) + "]"


def _iou(a: Bbox, b: Bbox) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def _attachment_bbox(att: Attachment) -> Bbox | None:
    if att.embedded_box is not None:
        return att.embedded_box
    if att.overlay is not None:
        return att.overlay.bbox
    return None


def _find_target(bundle: PromptBundle, uri: str, bbox: Bbox, iou_threshold: float) -> int | None:
    """1-based index of the attachment showing the target, or None."""
    for position, att in enumerate(bundle.attachments, start=1):
        if att.uri != uri:
            continue
        att_box = _attachment_bbox(att)
        if att_box is None or _iou(att_box, bbox) >= iou_threshold:
            return position
    return None


def _stable_uniform(*parts: object) -> float:
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2**64


class StaticClient:
    """Always returns the same raw text (garbage by default)."""

    def __init__(self, text: str = "I cannot determine a ranking for these images.") -> None:
        self.text = text

    def rank(self, bundle: PromptBundle) -> str:
        return self.text


class FailingClient:
    """Simulates an unreachable or erroring endpoint."""

    def __init__(self, message: str = "endpoint unreachable") -> None:
        self.message = message

    def rank(self, bundle: PromptBundle) -> str:
        raise RankerError(self.message)


class IdentityClient:
    def rank(self, bundle: PromptBundle) -> str:
        return render_ranking(range(1, len(bundle.attachments) + 1))


class ReversingClient:
    def rank(self, bundle: PromptBundle) -> str:
        return render_ranking(range(len(bundle.attachments), 0, -1))


class ScriptedClient:
    """Replays canned responses keyed by the query text T."""

    def __init__(self, responses: Mapping[str, str], default: str | None = None) -> None:
        self.responses = dict(responses)
        self.default = default

    @classmethod
    def from_file(cls, path: str | Path) -> ScriptedClient:
        with open(path, encoding="utf-8") as fh:
            table = json.load(fh)
        if not isinstance(table, dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in table.items()
        ):
            raise ValueError(f"script file {path} must map query text to response text")
        return cls(table, default=table.get("*"))

    def rank(self, bundle: PromptBundle) -> str:
        text = extract_query_text(bundle)
        if text in self.responses:
            return self.responses[text]
        if self.default is not None:
            return self.default
        raise RankerError(f"no scripted response for query {text!r}")


@dataclass(frozen=True)
class OracleTargets:
    """Ground truth visible to mock rankers: query text -> (image uri, bbox)."""

    by_text: Mapping[str, tuple[str, Bbox]]
    iou_threshold: float = 0.5

    @classmethod
    def from_ground_truth(
        cls,
        queries: Sequence,
        gt: Mapping[str, tuple[str, Bbox]],
        gallery: Gallery,
        iou_threshold: float = 0.5,
    ) -> OracleTargets:
        by_text: dict[str, tuple[str, Bbox]] = {}
        for query in queries:
            target = gt.get(query.query_id)
            if target is None:
                continue
            image_id, bbox = target
            by_text[query.text] = (gallery.image(image_id).uri, bbox)
        return cls(by_text=by_text, iou_threshold=iou_threshold)

    def locate(self, bundle: PromptBundle) -> int | None:
        text = extract_query_text(bundle)
        target = self.by_text.get(text)
        if target is None:
            return None
        uri, bbox = target
        return _find_target(bundle, uri, bbox, self.iou_threshold)


class OracleClient:
    """Puts the ground-truth candidate first whenever it appears in the prompt;
    otherwise returns the identity ranking."""

    def __init__(self, targets: OracleTargets) -> None:
        self.targets = targets

    def rank(self, bundle: PromptBundle) -> str:
        k = len(bundle.attachments)
        hit = self.targets.locate(bundle)
        if hit is None:
            return render_ranking(range(1, k + 1))
        rest = [i for i in range(1, k + 1) if i != hit]
        return render_ranking([hit, *rest])


class NoisyOracleClient:
    """Correct with probability p when the target is present, otherwise a
    seeded random permutation.

    The correctness draw is a stable hash of (seed, query text), so a given
    query is consistently easy or hard across candidate sizes and runs.
    """

    def __init__(self, targets: OracleTargets, p: float = 0.8, seed: int = 0) -> None:
        self.targets = targets
        self.p = p
        self.seed = seed

    def rank(self, bundle: PromptBundle) -> str:
        k = len(bundle.attachments)
        text = extract_query_text(bundle)
        hit = self.targets.locate(bundle)
        if hit is not None and _stable_uniform(self.seed, "correct", text) < self.p:
            rest = [i for i in range(1, k + 1) if i != hit]
            return render_ranking([hit, *rest])
        rng = random.Random(hashlib.sha256(f"{self.seed}|perm|{text}|{k}".encode()).digest())
        order = list(range(1, k + 1))
        rng.shuffle(order)
        return render_ranking(order)


def bundle_from_wire(body: dict) -> PromptBundle:
    """Rebuild a PromptBundle from a wire-contract request body."""
    try:
        content = body["messages"][0]["content"]
    except (KeyError, IndexError, TypeError):
        raise RankerError("wire body missing messages[0].content") from None
    text_blocks: list[str] = []
    attachments: list[Attachment] = []
    for part in content:
        kind = part.get("type")
        if kind == "text":
            text_blocks.append(part["text"])
        elif kind == "image":
            overlay = part.get("overlay")
            attachments.append(
                Attachment(
                    uri=part["uri"],
                    embedded_box=tuple(part["box"]) if "box" in part else None,
                    overlay=Overlay(
                        bbox=tuple(overlay["bbox"]),
                        color=overlay.get("color", "red"),
                        stroke_px=overlay.get("stroke_px", 4),
                    )
                    if overlay
                    else None,
                )
            )
        else:
            raise RankerError(f"unknown content part type {kind!r}")
    if any(a.embedded_box is not None for a in attachments):
        variant = PromptVariant.BEP
    elif any(a.overlay is not None for a in attachments):
        variant = PromptVariant.BOP
    else:
        variant = PromptVariant.NP
    return PromptBundle(variant=variant, text_blocks=tuple(text_blocks), attachments=tuple(attachments))


class _Handler(BaseHTTPRequestHandler):
    server: MockRankerServer  # type: ignore[assignment]

    def do_POST(self) -> None:  # noqa: N802 (http.server API)
        srv: MockRankerServer = self.server.owner  # type: ignore[attr-defined]
        if srv.delay:
            time.sleep(srv.delay)
        if srv.mode == "error":
            self.send_error(500, "injected failure")
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            body = json.loads(self.rfile.read(length))
            bundle = bundle_from_wire(body)
            text = srv.client.rank(bundle)
        except RankerError as exc:
            self._reply(422, {"error": str(exc)})
            return
        except Exception as exc:  # malformed body
            self._reply(400, {"error": str(exc)})
            return
        srv.requests_served += 1
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


class MockRankerServer:
    """Loopback HTTP server speaking the ranker wire contract.

    Modes: identity, reverse, garbage, scripted (canned responses), oracle,
    noisy-oracle, error (HTTP 500). An optional delay simulates slow upstreams.
    """

    def __init__(
        self,
        mode: str = "identity",
        *,
        script: Mapping[str, str] | str | Path | None = None,
        targets: OracleTargets | None = None,
        p: float = 0.8,
        seed: int = 0,
        host: str = "127.0.0.1",
        port: int = 0,
        delay: float = 0.0,
    ) -> None:
        self.mode = mode
        self.delay = delay
        self.requests_served = 0
        if mode == "identity":
            self.client = IdentityClient()
        elif mode == "reverse":
            self.client = ReversingClient()
        elif mode == "garbage":
            self.client = StaticClient()
        elif mode == "scripted":
            if script is None:
                raise ValueError("scripted mode requires a script table or file")
            self.client = (
                ScriptedClient.from_file(script)
                if isinstance(script, (str, Path))
                else ScriptedClient(script)
            )
        elif mode == "oracle":
            if targets is None:
                raise ValueError("oracle mode requires targets")
            self.client = OracleClient(targets)
        elif mode == "noisy-oracle":
            if targets is None:
                raise ValueError("noisy-oracle mode requires targets")
            self.client = NoisyOracleClient(targets, p=p, seed=seed)
        elif mode == "error":
            self.client = FailingClient()
        else:
            raise ValueError(f"unknown mock mode {mode!r}")
        self._httpd = ThreadingHTTPServer((host, port), _Handler)
        self._httpd.owner = self  # type: ignore[attr-defined]
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}/v1/rank"

    def start(self) -> MockRankerServer:
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self) -> MockRankerServer:
        return self.start()

    def __exit__(self, *exc: object) -> None:
        self.stop()
