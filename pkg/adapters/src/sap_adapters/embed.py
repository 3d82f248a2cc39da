"""Batch embedding export: crops, scenes, and query texts to SAPEMB01 files."""

from __future__ import annotations

from pathlib import Path

from PIL import Image

from .emb_format import write_embeddings
from .encoders import Encoder
from .fileio import AdapterError, read_jsonl, resolve_uri

BATCH = 32


def _load_image(uri: str, base: Path) -> Image.Image:
    path = resolve_uri(uri, base)
    try:
        with Image.open(path) as img:
            return img.convert("RGB")
    except (OSError, ValueError) as exc:
        raise AdapterError(f"cannot read image {uri!r}: {exc}") from exc


def _read_manifest(manifest: str | Path) -> dict[str, dict]:
    images: dict[str, dict] = {}
    for lineno, record in read_jsonl(manifest):
        try:
            images[record["image_id"]] = record
        except KeyError:
            raise AdapterError(f"{manifest}:{lineno}: missing image_id") from None
    return images


def export_scene_embeddings(manifest: str | Path, out: str | Path, encoder: Encoder) -> int:
    """Encode every full-scene image; keys are image ids."""
    base = Path(manifest).parent
    images = _read_manifest(manifest)
    entries = []
    batch_ids: list[str] = []
    batch_imgs: list[Image.Image] = []

    def flush() -> None:
        if batch_ids:
            vectors = encoder.encode_images(batch_imgs)
            entries.extend(zip(batch_ids, vectors))
            batch_ids.clear()
            batch_imgs.clear()

    for image_id, record in images.items():
        batch_ids.append(image_id)
        batch_imgs.append(_load_image(record["uri"], base))
        if len(batch_ids) >= BATCH:
            flush()
    flush()
    return write_embeddings(out, encoder.dim, entries)


def export_crop_embeddings(
    manifest: str | Path, detections: str | Path, out: str | Path, encoder: Encoder
) -> int:
    """Crop each detection out of its scene and encode it; keys are crop ids."""
    base = Path(manifest).parent
    images = _read_manifest(manifest)
    entries = []
    batch_ids: list[str] = []
    batch_imgs: list[Image.Image] = []
    scene_cache: dict[str, Image.Image] = {}

    def flush() -> None:
        if batch_ids:
            vectors = encoder.encode_images(batch_imgs)
            entries.extend(zip(batch_ids, vectors))
            batch_ids.clear()
            batch_imgs.clear()

    for lineno, record in read_jsonl(detections):
        try:
            crop_id = record["crop_id"]
            image_id = record["image_id"]
            x, y, w, h = record["bbox"]
        except (KeyError, ValueError, TypeError):
            raise AdapterError(f"{detections}:{lineno}: malformed detection record") from None
        if image_id not in images:
            raise AdapterError(f"{detections}:{lineno}: unknown image_id {image_id!r}")
        if image_id not in scene_cache:
            scene_cache[image_id] = _load_image(images[image_id]["uri"], base)
        scene = scene_cache[image_id]
        batch_ids.append(crop_id)
        batch_imgs.append(scene.crop((int(x), int(y), int(x + w), int(y + h))))
        if len(batch_ids) >= BATCH:
            flush()
    flush()
    return write_embeddings(out, encoder.dim, entries)


def export_query_embeddings(
    queries: str | Path, out: str | Path, encoder: Encoder, *, key_by: str = "query_id"
) -> int:
    """Encode each query's retrieval text (appearance text when present).

    key_by selects the embedding key: "query_id" for benchmark files, "text"
    for serving ad-hoc request texts.
    """
    if key_by not in ("query_id", "text"):
        raise AdapterError(f"key_by must be query_id or text, got {key_by!r}")
    keys: list[str] = []
    texts: list[str] = []
    seen: set[str] = set()
    for lineno, record in read_jsonl(queries):
        try:
            query_id = record["query_id"]
            text = record["text"]
        except KeyError:
            raise AdapterError(f"{queries}:{lineno}: missing query_id or text") from None
        retrieval_text = record.get("appearance_text") or text
        key = query_id if key_by == "query_id" else retrieval_text
        if key in seen:  # repeated texts collapse to one entry when keying by text
            continue
        seen.add(key)
        keys.append(key)
        texts.append(retrieval_text)
    entries = []
    for start in range(0, len(texts), BATCH):
        vectors = encoder.encode_texts(texts[start : start + BATCH])
        entries.extend(zip(keys[start : start + BATCH], vectors))
    return write_embeddings(out, encoder.dim, entries)
