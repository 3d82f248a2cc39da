from __future__ import annotations

import json

import numpy as np
import pytest

from sap.embeddings import EmbeddingMatrix
from sap.gallery import Gallery, GalleryImage, KeypointFlags, PersonCrop


def flags(head: bool = True, left: bool = True, right: bool = True) -> KeypointFlags:
    return KeypointFlags(head_visible=head, left_shoulder_visible=left, right_shoulder_visible=right)


@pytest.fixture
def small_gallery() -> Gallery:
    """Three images, four crops; img-b carries two crops."""
    images = (
        GalleryImage(image_id="img-a", uri="file:///g/a.jpg", width=100, height=50),
        GalleryImage(image_id="img-b", uri="file:///g/b.jpg", width=640, height=480),
        GalleryImage(image_id="img-c", uri="file:///g/c.jpg", width=320, height=240),
    )
    crops = (
        PersonCrop("crop-1", "img-a", (10, 10, 20, 30), 0.9, flags()),
        PersonCrop("crop-2", "img-b", (0, 0, 100, 200), 0.8, flags()),
        PersonCrop("crop-3", "img-b", (200, 100, 50, 150), 0.7, flags()),
        PersonCrop("crop-4", "img-c", (5, 5, 60, 120), 0.95, flags()),
    )
    return Gallery(images=images, crops=crops)


def write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")


@pytest.fixture
def gallery_files(tmp_path, small_gallery):
    manifest = tmp_path / "manifest.jsonl"
    detections = tmp_path / "detections.jsonl"
    write_jsonl(
        manifest,
        [
            {"image_id": i.image_id, "uri": i.uri, "width": i.width, "height": i.height}
            for i in small_gallery.images
        ],
    )
    write_jsonl(
        detections,
        [
            {
                "crop_id": c.crop_id,
                "image_id": c.source_image_id,
                "bbox": list(c.bbox),
                "confidence": c.confidence,
                "keypoints": {
                    "head": c.keypoints.head_visible,
                    "l_shoulder": c.keypoints.left_shoulder_visible,
                    "r_shoulder": c.keypoints.right_shoulder_visible,
                },
            }
            for c in small_gallery.crops
        ],
    )
    return manifest, detections


def unit_rows(rows: list[list[float]]) -> np.ndarray:
    block = np.asarray(rows, dtype=np.float64)
    return (block / np.linalg.norm(block, axis=1)[:, None]).astype(np.float32)


def materialize_fixture(fx, root, *, endpoint: str = "", model: str = "mock") -> dict[str, str]:
    """Write a synth fixture to disk and return the path map plus a config file."""
    import yaml

    from sap.embeddings import save_embeddings
    from sap.gallery import save_gallery

    root.mkdir(parents=True, exist_ok=True)
    paths = {
        "manifest": str(root / "manifest.jsonl"),
        "detections": str(root / "detections.jsonl"),
        "crop_embeddings": str(root / "crops.sapemb"),
        "scene_embeddings": str(root / "scenes.sapemb"),
        "text_embeddings": str(root / "texts.sapemb"),
        "queries": str(root / "queries.jsonl"),
    }
    save_gallery(fx.gallery, paths["manifest"], paths["detections"])
    save_embeddings(fx.crop_embs, paths["crop_embeddings"])
    save_embeddings(fx.scene_embs, paths["scene_embeddings"])
    save_embeddings(fx.text_embs, paths["text_embeddings"])
    write_jsonl(
        paths["queries"],
        [
            {
                "query_id": q.query_id,
                "text": q.text,
                "appearance_text": q.appearance_text,
                "gt": {"image_id": fx.gt[q.query_id][0], "bbox": list(fx.gt[q.query_id][1])},
            }
            for q in fx.queries
        ],
    )
    config = dict(paths)
    if endpoint:
        config["endpoint"] = endpoint
        config["model"] = model
    config_path = root / "sap.yaml"
    config_path.write_text(yaml.safe_dump(config))
    paths["config"] = str(config_path)
    return paths


def matrix(entries: dict[str, list[float]], normalized: bool = False) -> EmbeddingMatrix:
    keys = tuple(entries)
    rows = [entries[k] for k in keys]
    vectors = unit_rows(rows) if normalized else np.asarray(rows, dtype=np.float32)
    return EmbeddingMatrix(dim=vectors.shape[1], keys=keys, vectors=vectors)
