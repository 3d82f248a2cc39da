"""Stage one: appearance scoring, exact top-K selection, crop-to-scene mapping.

Scoring is an exact full scan over the gallery so results are reproducible and
checkable against a brute-force sort. Ties break by ascending crop_id.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

from .embeddings import EmbeddingMatrix, scores_against
from .gallery import Bbox, Gallery, GalleryImage, IngestError

DEFAULT_K = 10


@dataclass(frozen=True)
class TextQuery:
    query_id: str
    text: str
    appearance_text: str | None = None
    text_embedding_key: str | None = None

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError(f"query {self.query_id!r}: text must be non-empty")

    @property
    def retrieval_text(self) -> str:
        """Appearance-focused text when provided, full description otherwise."""
        return self.appearance_text if self.appearance_text else self.text

    @property
    def embedding_key(self) -> str:
        return self.text_embedding_key if self.text_embedding_key else self.query_id


@dataclass(frozen=True)
class ScoredCandidate:
    crop_id: str
    score: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.score):
            raise ValueError(f"crop {self.crop_id!r}: non-finite score {self.score}")


@dataclass(frozen=True)
class CandidateSet:
    candidates: tuple[ScoredCandidate, ...]

    def __post_init__(self) -> None:
        seen: set[str] = set()
        previous: ScoredCandidate | None = None
        for cand in self.candidates:
            if cand.crop_id in seen:
                raise ValueError(f"duplicate crop_id {cand.crop_id!r} in candidate set")
            seen.add(cand.crop_id)
            if previous is not None:
                if cand.score > previous.score:
                    raise ValueError("candidate scores must be non-increasing")
                if cand.score == previous.score and cand.crop_id < previous.crop_id:
                    raise ValueError("tied candidates must be ordered by ascending crop_id")
            previous = cand

    def __len__(self) -> int:
        return len(self.candidates)

    def crop_ids(self) -> tuple[str, ...]:
        return tuple(c.crop_id for c in self.candidates)


@dataclass(frozen=True)
class SceneCandidate:
    """A top-K candidate mapped back to the full scene it was cropped from."""

    index: int  # 1-based position within the candidate set
    image: GalleryImage
    bbox: Bbox
    crop_id: str


def score_gallery(
    query: TextQuery,
    text_embs: EmbeddingMatrix,
    crop_embs: EmbeddingMatrix,
    gallery: Gallery,
) -> list[ScoredCandidate]:
    """Cosine-score every gallery crop against the query's text embedding."""
    qvec = text_embs.vector(query.embedding_key)
    for crop in gallery.crops:
        if crop.crop_id not in crop_embs:
            raise KeyError(f"no crop embedding for {crop.crop_id!r}")
    if not gallery.crops:
        return []
    rows = [crop_embs.row(c.crop_id) for c in gallery.crops]
    scores = scores_against(crop_embs, qvec)
    return [
        ScoredCandidate(crop_id=crop.crop_id, score=float(scores[row]))
        for crop, row in zip(gallery.crops, rows)
    ]


def full_ranking(scores: list[ScoredCandidate]) -> list[ScoredCandidate]:
    """Every crop sorted by score descending, ties by ascending crop_id."""
    return sorted(scores, key=lambda s: (-s.score, s.crop_id))


def top_k(scores: list[ScoredCandidate], k: int) -> CandidateSet:
    """The first min(k, len) entries of the full ranking."""
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    return CandidateSet(candidates=tuple(full_ranking(scores)[:k]))


def map_to_scene(cands: CandidateSet, gallery: Gallery) -> tuple[SceneCandidate, ...]:
    """Attach each candidate's source scene and bbox, preserving order."""
    mapped: list[SceneCandidate] = []
    for position, cand in enumerate(cands.candidates, start=1):
        if not gallery.has_crop(cand.crop_id):
            raise KeyError(f"dangling crop_id {cand.crop_id!r}")
        crop = gallery.crop(cand.crop_id)
        mapped.append(
            SceneCandidate(
                index=position,
                image=gallery.image(crop.source_image_id),
                bbox=crop.bbox,
                crop_id=cand.crop_id,
            )
        )
    return tuple(mapped)


def load_queries(path: str | Path) -> tuple[list[TextQuery], dict[str, tuple[str, Bbox]]]:
    """Read the line-delimited queries file; returns (queries, ground truth).

    Ground truth maps query_id -> (image_id, bbox); queries without a "gt"
    field are returned with no ground-truth entry.
    """
    path = Path(path)
    if not path.exists():
        raise IngestError(f"missing file: {path}")
    queries: list[TextQuery] = []
    gt: dict[str, tuple[str, Bbox]] = {}
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestError(f"{where}: malformed record: {exc.msg}") from None
            if not isinstance(record, dict):
                raise IngestError(f"{where}: malformed record: expected a JSON object")
            try:
                query_id = record["query_id"]
                text = record["text"]
            except KeyError as exc:
                raise IngestError(f"{where}: missing field {exc.args[0]!r}") from None
            if query_id in seen:
                raise IngestError(f"{where}: duplicate query_id {query_id!r}")
            seen.add(query_id)
            appearance = record.get("appearance_text")
            try:
                queries.append(
                    TextQuery(query_id=query_id, text=text, appearance_text=appearance)
                )
            except ValueError as exc:
                raise IngestError(f"{where}: {exc}") from None
            target = record.get("gt")
            if target is not None:
                if (
                    not isinstance(target, dict)
                    or "image_id" not in target
                    or "bbox" not in target
                    or not isinstance(target["bbox"], list)
                    or len(target["bbox"]) != 4
                ):
                    raise IngestError(f"{where}: gt must be {{image_id, bbox[4]}}")
                gt[query_id] = (target["image_id"], tuple(target["bbox"]))
    return queries, gt
