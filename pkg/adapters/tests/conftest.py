from __future__ import annotations

import json
from pathlib import Path

import pytest
from PIL import Image, ImageDraw

BODY = (120, 120, 120)
HEAD = (255, 0, 0)
LEFT_SHOULDER = (0, 255, 0)
RIGHT_SHOULDER = (0, 0, 255)

PERSON_BBOX = (30.0, 20.0, 61.0, 121.0)  # non-white extent of the staged figure


def stage_person_image(
    path: Path,
    size: tuple[int, int] = (120, 160),
    head: bool = True,
    left_shoulder: bool = True,
    right_shoulder: bool = True,
) -> None:
    """A staged figure: gray body plus pure-color head/shoulder markers."""
    img = Image.new("RGB", size, (255, 255, 255))
    draw = ImageDraw.Draw(img)
    draw.rectangle([30, 20, 90, 140], fill=BODY)
    if head:
        draw.rectangle([55, 24, 65, 34], fill=HEAD)
    if left_shoulder:
        draw.rectangle([34, 44, 44, 54], fill=LEFT_SHOULDER)
    if right_shoulder:
        draw.rectangle([76, 44, 86, 54], fill=RIGHT_SHOULDER)
    img.save(path)


def stage_empty_image(path: Path, size: tuple[int, int] = (120, 160)) -> None:
    Image.new("RGB", size, (255, 255, 255)).save(path)


def write_jsonl(path: Path, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")


@pytest.fixture()
def staged_gallery(tmp_path):
    """Three staged scene images with a manifest; img-c has no person."""
    root = tmp_path / "gallery"
    root.mkdir()
    stage_person_image(root / "img-a.png")
    stage_person_image(root / "img-b.png", head=False)
    stage_empty_image(root / "img-c.png")
    manifest = root / "manifest.jsonl"
    write_jsonl(
        manifest,
        [
            {"image_id": "img-a", "uri": "img-a.png", "width": 120, "height": 160},
            {"image_id": "img-b", "uri": "img-b.png", "width": 120, "height": 160},
            {"image_id": "img-c", "uri": "img-c.png", "width": 120, "height": 160},
        ],
    )
    return root, manifest


@pytest.fixture()
def staged_detections(staged_gallery):
    root, manifest = staged_gallery
    detections = root / "detections.jsonl"
    write_jsonl(
        detections,
        [
            {
                "crop_id": f"{image_id}-p1",
                "image_id": image_id,
                "bbox": list(PERSON_BBOX),
                "confidence": 0.9,
                "keypoints": {"head": True, "l_shoulder": True, "r_shoulder": True},
            }
            for image_id in ("img-a", "img-b")
        ],
    )
    return root, manifest, detections


@pytest.fixture()
def staged_queries(tmp_path):
    queries = tmp_path / "queries.jsonl"
    write_jsonl(
        queries,
        [
            {"query_id": "q1", "text": "a person by the window", "appearance_text": "gray outfit"},
            {"query_id": "q2", "text": "someone walking a bike", "appearance_text": None},
        ],
    )
    return queries
