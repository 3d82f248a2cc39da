"""Stage two: multimodal prompt construction, the external ranker call, and
permutation merging.

The ranker is reached only through a wire contract; nothing here touches
pixels. All indices are 1-based in prompts and permutations (matching the
Image-1..K lines) and converted to 0-based only when merging into the coarse
ranking.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Protocol, Sequence

import requests

from .gallery import Bbox
from .retrieval import SceneCandidate

INSTRUCTION_TEMPLATE = (
    'Instruction: For the text description: "{text}", order the images based on how '
    "accurately they reflect the overall context in the text, starting with the most "
    "faithful match. Please output only a Python list format like this: "
    "[4, 2, 8, 1, 5, 3, 6, 9, 10, 7, ..., {k}]."
)

DEFAULT_OVERLAY_COLOR = "red"
DEFAULT_OVERLAY_STROKE_PX = 4
DEFAULT_MAX_OUTPUT_TOKENS = 128

_BRACKETED_INT_LIST = re.compile(r"\[\s*[+-]?\d+(?:\s*,\s*[+-]?\d+)*\s*,?\s*\]")
_INT = re.compile(r"[+-]?\d+")


class PromptVariant(str, Enum):
    """How candidate regions are communicated to the ranker."""

    NP = "np"  # text and full-scene images only
    BOP = "bop"  # red rectangle drawn over the candidate region
    BEP = "bep"  # bbox coordinates embedded in <box> tags


@dataclass(frozen=True)
class Overlay:
    """An instruction to draw a rectangle on the attached image before sending."""

    bbox: Bbox
    color: str = DEFAULT_OVERLAY_COLOR
    stroke_px: int = DEFAULT_OVERLAY_STROKE_PX


@dataclass(frozen=True)
class Attachment:
    uri: str
    overlay: Overlay | None = None
    embedded_box: Bbox | None = None


@dataclass(frozen=True)
class PromptBundle:
    variant: PromptVariant
    text_blocks: tuple[str, ...]
    attachments: tuple[Attachment, ...]

    def __post_init__(self) -> None:
        for att in self.attachments:
            if self.variant is PromptVariant.BEP:
                if att.embedded_box is None or att.overlay is not None:
                    raise ValueError("BEP attachments carry an embedded box and no overlay")
            elif self.variant is PromptVariant.BOP:
                if att.overlay is None or att.embedded_box is not None:
                    raise ValueError("BOP attachments carry an overlay and no embedded box")
            else:
                if att.overlay is not None or att.embedded_box is not None:
                    raise ValueError("NP attachments carry neither overlay nor embedded box")

    def prompt_text(self) -> str:
        return "\n".join(self.text_blocks)


@dataclass(frozen=True)
class Permutation:
    """A reordering of candidate indices 1..K."""

    order: tuple[int, ...]

    def __post_init__(self) -> None:
        k = len(self.order)
        if sorted(self.order) != list(range(1, k + 1)):
            raise ValueError(f"order {self.order} is not a permutation of 1..{k}")

    def __len__(self) -> int:
        return len(self.order)

    def is_identity(self) -> bool:
        return all(v == i for i, v in enumerate(self.order, start=1))


@dataclass(frozen=True)
class ParseFailure:
    """Returned (never raised) when no ranking can be extracted from raw text."""

    reason: str


@dataclass(frozen=True)
class RankedResult:
    query_id: str
    final_order: tuple[str, ...]
    rerank_applied: bool
    raw_ranker_text: str = ""


class RankerError(RuntimeError):
    """The ranker endpoint failed, timed out, or broke the wire contract."""


class RankerClient(Protocol):
    """Anything that turns a PromptBundle into raw ranker text.

    Deterministic clients must return identical text for identical bundles.
    Failures are signalled by raising RankerError.
    """

    def rank(self, bundle: PromptBundle) -> str: ...


def format_box(bbox: Bbox) -> str:
    """Render a bbox as `[x, y, w, h]` in source-image pixels."""
    return "[" + ", ".join(str(v) for v in bbox) + "]"


def build_prompt(
    variant: PromptVariant,
    scene_cands: Sequence[SceneCandidate],
    text: str,
) -> PromptBundle:
    """Assemble the Image-1..K lines plus the ranking instruction.

    BEP embeds each candidate's bbox in <box> tags; BOP attaches a red-rectangle
    overlay instruction instead; NP sends the bare scene images.
    """
    if not scene_cands:
        raise ValueError("candidate list must be non-empty")
    if not text:
        raise ValueError("text must be non-empty")
    lines: list[str] = []
    attachments: list[Attachment] = []
    for cand in scene_cands:
        if variant is PromptVariant.BEP:
            lines.append(f"Image-{cand.index}: <image> <box>{format_box(cand.bbox)}</box>")
            attachments.append(Attachment(uri=cand.image.uri, embedded_box=cand.bbox))
        elif variant is PromptVariant.BOP:
            lines.append(f"Image-{cand.index}: <image>")
            attachments.append(Attachment(uri=cand.image.uri, overlay=Overlay(bbox=cand.bbox)))
        else:
            lines.append(f"Image-{cand.index}: <image>")
            attachments.append(Attachment(uri=cand.image.uri))
    instruction = INSTRUCTION_TEMPLATE.format(text=text, k=len(scene_cands))
    return PromptBundle(
        variant=variant,
        text_blocks=(*lines, instruction),
        attachments=tuple(attachments),
    )


def parse_ranking(raw: str | bytes, k: int) -> Permutation | ParseFailure:
    """Extract the first bracketed integer list from raw ranker output.

    Whatever integers are found are repaired into a valid permutation of 1..K;
    arbitrary input never raises.
    """
    if k < 1:
        return ParseFailure(reason=f"K must be >= 1, got {k}")
    if isinstance(raw, bytes):
        raw = raw.decode("utf-8", errors="replace")
    match = _BRACKETED_INT_LIST.search(raw)
    if match is None:
        return ParseFailure(reason="no bracketed integer list in ranker output")
    values = [int(tok) for tok in _INT.findall(match.group(0))]
    return repair_ranking(values, k)


def repair_ranking(raw_list: Sequence[int], k: int) -> Permutation:
    """Coerce an arbitrary integer list into a permutation of 1..K.

    Out-of-range entries are dropped, duplicates keep their first occurrence,
    and missing indices are appended in ascending order. Valid permutations
    pass through unchanged.
    """
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    kept: list[int] = []
    seen: set[int] = set()
    for value in raw_list:
        if 1 <= value <= k and value not in seen:
            kept.append(value)
            seen.add(value)
    kept.extend(i for i in range(1, k + 1) if i not in seen)
    return Permutation(order=tuple(kept))


def apply_rerank(
    coarse: Sequence[str],
    perm: Permutation,
    k: int,
    *,
    query_id: str = "",
    raw_text: str = "",
) -> RankedResult:
    """Reorder the top-K prefix of the coarse ranking by `perm`.

    Positions K+1..end are untouched, so recall at any depth >= K is unchanged
    by construction.
    """
    if len(perm) != k:
        raise ValueError(f"permutation has {len(perm)} entries, expected K={k}")
    if k > len(coarse):
        raise ValueError(f"K={k} exceeds coarse ranking length {len(coarse)}")
    prefix = tuple(coarse[m - 1] for m in perm.order)
    final = prefix + tuple(coarse[k:])
    return RankedResult(
        query_id=query_id,
        final_order=final,
        rerank_applied=True,
        raw_ranker_text=raw_text,
    )


def coarse_result(coarse: Sequence[str], *, query_id: str = "", raw_text: str = "") -> RankedResult:
    return RankedResult(
        query_id=query_id,
        final_order=tuple(coarse),
        rerank_applied=False,
        raw_ranker_text=raw_text,
    )


def rank_with_fallback(
    client: RankerClient,
    variant: PromptVariant,
    scene_cands: Sequence[SceneCandidate],
    text: str,
    coarse: Sequence[str],
    *,
    query_id: str = "",
    retries: int = 0,
) -> RankedResult:
    """Run the full rerank step, degrading to the coarse order on any failure.

    A client error, timeout, or unparseable output never fails the query: the
    coarse ranking is returned with rerank_applied=False and whatever raw text
    was received kept for audit.
    """
    bundle = build_prompt(variant, scene_cands, text)
    k = len(scene_cands)
    raw = ""
    for attempt in range(retries + 1):
        try:
            raw = client.rank(bundle)
        except RankerError:
            continue
        parsed = parse_ranking(raw, k)
        if isinstance(parsed, Permutation):
            return apply_rerank(coarse, parsed, k, query_id=query_id, raw_text=raw)
    return coarse_result(coarse, query_id=query_id, raw_text=raw)


class HttpRankerClient:
    """Speaks the ranker wire contract over HTTP with deterministic decoding."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        *,
        max_output_tokens: int = DEFAULT_MAX_OUTPUT_TOKENS,
        timeout: float = 60.0,
    ) -> None:
        self.endpoint = endpoint
        self.model = model
        self.max_output_tokens = max_output_tokens
        self.timeout = timeout

    def rank(self, bundle: PromptBundle) -> str:
        try:
            response = requests.post(
                self.endpoint,
                json=wire_request(bundle, model=self.model, max_tokens=self.max_output_tokens),
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise RankerError(f"ranker request failed: {exc}") from exc
        if response.status_code != 200:
            raise RankerError(f"ranker returned HTTP {response.status_code}")
        try:
            body = response.json()
        except ValueError as exc:
            raise RankerError("ranker response is not JSON") from exc
        text = body.get("text") if isinstance(body, dict) else None
        if not isinstance(text, str):
            raise RankerError("ranker response missing text field")
        return text


def wire_request(bundle: PromptBundle, *, model: str, max_tokens: int = DEFAULT_MAX_OUTPUT_TOKENS) -> dict:
    """Encode a PromptBundle as the wire-contract request body.

    Text parts interleave with image parts in candidate order; BEP box
    coordinates and BOP overlay instructions ride along as per-image metadata.
    """
    content: list[dict] = []
    for line, att in zip(bundle.text_blocks, bundle.attachments):
        content.append({"type": "text", "text": line})
        image_part: dict = {"type": "image", "uri": att.uri}
        if att.embedded_box is not None:
            image_part["box"] = list(att.embedded_box)
        if att.overlay is not None:
            image_part["overlay"] = {
                "shape": "rectangle",
                "color": att.overlay.color,
                "bbox": list(att.overlay.bbox),
                "stroke_px": att.overlay.stroke_px,
            }
        content.append(image_part)
    for line in bundle.text_blocks[len(bundle.attachments):]:
        content.append({"type": "text", "text": line})
    return {
        "model": model,
        "max_tokens": max_tokens,
        "temperature": 0,
        "messages": [{"role": "user", "content": content}],
    }
