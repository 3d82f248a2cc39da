"""Gallery ingestion: manifests, detection records, hygiene filters.

A Gallery is immutable once built; ingestion is the single writer. Invalid
records abort ingestion unless lenient mode is requested, in which case they
are logged and skipped (silent data loss is opt-in, never the default).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .embeddings import EmbeddingMatrix

log = logging.getLogger(__name__)

Bbox = tuple[float, float, float, float]

DEFAULT_DEDUP_THRESHOLD = 0.95


class IngestError(ValueError):
    """A gallery file or record that violates the ingest contract."""


@dataclass(frozen=True)
class KeypointFlags:
    head_visible: bool
    left_shoulder_visible: bool
    right_shoulder_visible: bool


@dataclass(frozen=True)
class GalleryImage:
    image_id: str
    uri: str
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise IngestError(f"image {self.image_id!r}: non-positive size {self.width}x{self.height}")


@dataclass(frozen=True)
class PersonCrop:
    crop_id: str
    source_image_id: str
    bbox: Bbox
    confidence: float
    keypoints: KeypointFlags

    def __post_init__(self) -> None:
        x, y, w, h = self.bbox
        if x < 0 or y < 0:
            raise IngestError(f"crop {self.crop_id!r}: negative bbox origin ({x}, {y})")
        if w <= 0 or h <= 0:
            raise IngestError(f"crop {self.crop_id!r}: non-positive bbox size ({w}, {h})")
        if not 0.0 <= self.confidence <= 1.0:
            raise IngestError(f"crop {self.crop_id!r}: confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class Gallery:
    images: tuple[GalleryImage, ...]
    crops: tuple[PersonCrop, ...]
    _image_index: dict[str, GalleryImage] = field(repr=False, compare=False, default_factory=dict)
    _crop_index: dict[str, PersonCrop] = field(repr=False, compare=False, default_factory=dict)

    def __post_init__(self) -> None:
        images: dict[str, GalleryImage] = {}
        for img in self.images:
            if img.image_id in images:
                raise IngestError(f"duplicate image_id {img.image_id!r}")
            images[img.image_id] = img
        crops: dict[str, PersonCrop] = {}
        for crop in self.crops:
            if crop.crop_id in crops:
                raise IngestError(f"duplicate crop_id {crop.crop_id!r}")
            src = images.get(crop.source_image_id)
            if src is None:
                raise IngestError(
                    f"crop {crop.crop_id!r}: dangling source_image_id {crop.source_image_id!r}"
                )
            x, y, w, h = crop.bbox
            if x + w > src.width or y + h > src.height:
                raise IngestError(
                    f"crop {crop.crop_id!r}: bbox out of bounds for image "
                    f"{src.image_id!r} ({src.width}x{src.height})"
                )
            crops[crop.crop_id] = crop
        object.__setattr__(self, "_image_index", images)
        object.__setattr__(self, "_crop_index", crops)

    def image(self, image_id: str) -> GalleryImage:
        try:
            return self._image_index[image_id]
        except KeyError:
            raise KeyError(f"no image {image_id!r} in gallery") from None

    def crop(self, crop_id: str) -> PersonCrop:
        try:
            return self._crop_index[crop_id]
        except KeyError:
            raise KeyError(f"no crop {crop_id!r} in gallery") from None

    def has_crop(self, crop_id: str) -> bool:
        return crop_id in self._crop_index


def _require(record: dict, key: str, where: str):
    if key not in record:
        raise IngestError(f"{where}: missing field {key!r}")
    return record[key]


def _parse_image(record: dict, where: str) -> GalleryImage:
    image_id = _require(record, "image_id", where)
    uri = _require(record, "uri", where)
    width = _require(record, "width", where)
    height = _require(record, "height", where)
    if not isinstance(image_id, str) or not isinstance(uri, str):
        raise IngestError(f"{where}: image_id and uri must be strings")
    if not isinstance(width, int) or not isinstance(height, int) or isinstance(width, bool) or isinstance(height, bool):
        raise IngestError(f"{where}: width and height must be integers")
    try:
        return GalleryImage(image_id=image_id, uri=uri, width=width, height=height)
    except IngestError as exc:
        raise IngestError(f"{where}: {exc}") from None


def _parse_crop(record: dict, where: str) -> PersonCrop:
    crop_id = _require(record, "crop_id", where)
    image_id = _require(record, "image_id", where)
    bbox = _require(record, "bbox", where)
    confidence = _require(record, "confidence", where)
    keypoints = _require(record, "keypoints", where)
    if not isinstance(crop_id, str) or not isinstance(image_id, str):
        raise IngestError(f"{where}: crop_id and image_id must be strings")
    if (
        not isinstance(bbox, list)
        or len(bbox) != 4
        or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in bbox)
    ):
        raise IngestError(f"{where}: bbox must be [x, y, w, h] numbers")
    if not isinstance(confidence, (int, float)) or isinstance(confidence, bool):
        raise IngestError(f"{where}: confidence must be a number")
    if not isinstance(keypoints, dict):
        raise IngestError(f"{where}: keypoints must be an object")
    flags = {}
    for name in ("head", "l_shoulder", "r_shoulder"):
        value = _require(keypoints, name, where)
        if not isinstance(value, bool):
            raise IngestError(f"{where}: keypoints.{name} must be a boolean")
        flags[name] = value
    try:
        return PersonCrop(
            crop_id=crop_id,
            source_image_id=image_id,
            bbox=tuple(bbox),
            confidence=float(confidence),
            keypoints=KeypointFlags(
                head_visible=flags["head"],
                left_shoulder_visible=flags["l_shoulder"],
                right_shoulder_visible=flags["r_shoulder"],
            ),
        )
    except IngestError as exc:
        raise IngestError(f"{where}: {exc}") from None


def _read_records(path: Path) -> Iterable[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestError(f"{path}:{lineno}: malformed record: {exc.msg}") from None
            if not isinstance(record, dict):
                raise IngestError(f"{path}:{lineno}: malformed record: expected a JSON object")
            yield lineno, record


def load_manifest(manifest_path: str | Path, detections_path: str | Path, *, lenient: bool = False) -> Gallery:
    """Load a gallery from a manifest file and a detections file.

    Strict mode rejects the whole ingest on the first invalid record, reporting
    the file and line number. Lenient mode logs and skips invalid records.
    """
    manifest_path = Path(manifest_path)
    detections_path = Path(detections_path)
    for p in (manifest_path, detections_path):
        if not p.exists():
            raise IngestError(f"missing file: {p}")

    images: list[GalleryImage] = []
    seen_images: dict[str, GalleryImage] = {}
    for lineno, record in _read_records(manifest_path):
        where = f"{manifest_path}:{lineno}"
        try:
            img = _parse_image(record, where)
            if img.image_id in seen_images:
                raise IngestError(f"{where}: duplicate image_id {img.image_id!r}")
        except IngestError as exc:
            if lenient:
                log.warning("skipping image record: %s", exc)
                continue
            raise
        seen_images[img.image_id] = img
        images.append(img)

    crops: list[PersonCrop] = []
    seen_crops: set[str] = set()
    for lineno, record in _read_records(detections_path):
        where = f"{detections_path}:{lineno}"
        try:
            crop = _parse_crop(record, where)
            if crop.crop_id in seen_crops:
                raise IngestError(f"{where}: duplicate crop_id {crop.crop_id!r}")
            src = seen_images.get(crop.source_image_id)
            if src is None:
                raise IngestError(
                    f"{where}: dangling source_image_id {crop.source_image_id!r}"
                )
            x, y, w, h = crop.bbox
            if x + w > src.width or y + h > src.height:
                raise IngestError(
                    f"{where}: bbox out of bounds for image {src.image_id!r} "
                    f"({src.width}x{src.height})"
                )
        except IngestError as exc:
            if lenient:
                log.warning("skipping detection record: %s", exc)
                continue
            raise
        seen_crops.add(crop.crop_id)
        crops.append(crop)

    return Gallery(images=tuple(images), crops=tuple(crops))


def save_images(gallery: Gallery, manifest_path: str | Path) -> None:
    with open(manifest_path, "w", encoding="utf-8") as fh:
        for img in gallery.images:
            fh.write(
                json.dumps(
                    {"image_id": img.image_id, "uri": img.uri, "width": img.width, "height": img.height}
                )
                + "\n"
            )


def save_detections(gallery: Gallery, detections_path: str | Path) -> None:
    with open(detections_path, "w", encoding="utf-8") as fh:
        for crop in gallery.crops:
            fh.write(
                json.dumps(
                    {
                        "crop_id": crop.crop_id,
                        "image_id": crop.source_image_id,
                        "bbox": list(crop.bbox),
                        "confidence": crop.confidence,
                        "keypoints": {
                            "head": crop.keypoints.head_visible,
                            "l_shoulder": crop.keypoints.left_shoulder_visible,
                            "r_shoulder": crop.keypoints.right_shoulder_visible,
                        },
                    }
                )
                + "\n"
            )


def save_gallery(gallery: Gallery, manifest_path: str | Path, detections_path: str | Path) -> None:
    """Write a gallery back out in the line-delimited manifest formats."""
    save_images(gallery, manifest_path)
    save_detections(gallery, detections_path)


def completeness_filter(flags: KeypointFlags) -> bool:
    """Keep a detection only if the head and at least one shoulder are visible."""
    return flags.head_visible and (flags.left_shoulder_visible or flags.right_shoulder_visible)


def apply_filter(gallery: Gallery) -> Gallery:
    """Drop crops failing the completeness filter; images are untouched."""
    kept = tuple(c for c in gallery.crops if completeness_filter(c.keypoints))
    return Gallery(images=gallery.images, crops=kept)


def dedup(
    gallery: Gallery,
    crop_embeddings: EmbeddingMatrix,
    scene_embeddings: EmbeddingMatrix,
    threshold: float = DEFAULT_DEDUP_THRESHOLD,
) -> Gallery:
    """Discard near-duplicate crops, greedily scanning in ascending crop_id order.

    A crop is discarded iff some earlier retained crop is within `threshold`
    cosine similarity on BOTH the crop embeddings and the two source-scene
    embeddings. Keep-first over a total order makes the scan deterministic and
    idempotent.
    """
    for crop in gallery.crops:
        if crop.crop_id not in crop_embeddings:
            raise KeyError(f"no crop embedding for {crop.crop_id!r}")
        if crop.source_image_id not in scene_embeddings:
            raise KeyError(f"no scene embedding for image {crop.source_image_id!r}")

    ordered = sorted(gallery.crops, key=lambda c: c.crop_id)
    if not ordered:
        return gallery

    def unit_rows(matrix: EmbeddingMatrix, keys: Sequence[str]) -> np.ndarray:
        block = np.stack([matrix.vector(k) for k in keys]).astype(np.float64)
        norms = np.linalg.norm(block, axis=1)
        zero = np.flatnonzero(norms == 0.0)
        if zero.size:
            raise ValueError(f"zero-norm embedding for key {keys[zero[0]]!r}")
        return block / norms[:, None]

    crop_unit = unit_rows(crop_embeddings, [c.crop_id for c in ordered])
    scene_unit = unit_rows(scene_embeddings, [c.source_image_id for c in ordered])

    retained_rows: list[int] = []
    retained_ids: set[str] = set()
    for i, crop in enumerate(ordered):
        if retained_rows:
            crop_cos = crop_unit[retained_rows] @ crop_unit[i]
            scene_cos = scene_unit[retained_rows] @ scene_unit[i]
            if bool(np.any((crop_cos >= threshold) & (scene_cos >= threshold))):
                continue
        retained_rows.append(i)
        retained_ids.add(crop.crop_id)

    kept = tuple(c for c in gallery.crops if c.crop_id in retained_ids)
    return Gallery(images=gallery.images, crops=kept)
