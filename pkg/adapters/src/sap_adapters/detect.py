"""Detection export: turn per-frame detector+pose output into the engine's
detections file.

The canonical path translates raw track records exported by an upstream
detector/pose stack: best frame per track (highest confidence, earliest frame
on ties), landmark confidences mapped to head/shoulder visibility flags, and
bboxes clipped to image bounds. The `marker` backend instead reads staged
fixture images where the person is any non-white region and the head and
shoulders are pure red/green/blue markers, which gives CI a pixel-driven path
with known ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .fileio import AdapterError, read_jsonl, resolve_uri, write_jsonl

LANDMARK_CONFIDENCE = 0.5
HEAD_LANDMARKS = ("nose", "left_eye", "right_eye", "left_ear", "right_ear")

MARKER_HEAD = (255, 0, 0)
MARKER_LEFT_SHOULDER = (0, 255, 0)
MARKER_RIGHT_SHOULDER = (0, 0, 255)
_MARKER_CONFIDENCE = 0.9


@dataclass(frozen=True)
class RawDetection:
    track_id: str
    image_id: str
    frame_index: int
    bbox: tuple[float, float, float, float]
    confidence: float
    landmarks: dict[str, tuple[float, float, float]]


def _landmark_visible(landmarks: dict[str, tuple[float, float, float]], name: str) -> bool:
    point = landmarks.get(name)
    return point is not None and point[2] >= LANDMARK_CONFIDENCE


def flags_from_landmarks(landmarks: dict[str, tuple[float, float, float]]) -> dict[str, bool]:
    """Head = any confident head landmark; shoulders per matching landmark."""
    return {
        "head": any(_landmark_visible(landmarks, name) for name in HEAD_LANDMARKS),
        "l_shoulder": _landmark_visible(landmarks, "left_shoulder"),
        "r_shoulder": _landmark_visible(landmarks, "right_shoulder"),
    }


def clip_bbox(
    bbox: tuple[float, float, float, float], width: int, height: int
) -> tuple[float, float, float, float] | None:
    """Intersect a bbox with the image; None when nothing remains."""
    x, y, w, h = bbox
    x0 = max(0.0, float(x))
    y0 = max(0.0, float(y))
    x1 = min(float(width), float(x) + float(w))
    y1 = min(float(height), float(y) + float(h))
    if x1 <= x0 or y1 <= y0:
        return None
    return (x0, y0, x1 - x0, y1 - y0)


def _parse_raw(path: str | Path) -> list[RawDetection]:
    records = []
    for lineno, record in read_jsonl(path):
        try:
            landmarks = {
                name: (float(p[0]), float(p[1]), float(p[2]))
                for name, p in record.get("landmarks", {}).items()
            }
            records.append(
                RawDetection(
                    track_id=record["track_id"],
                    image_id=record["image_id"],
                    frame_index=int(record.get("frame_index", lineno)),
                    bbox=tuple(float(v) for v in record["bbox"]),
                    confidence=float(record["confidence"]),
                    landmarks=landmarks,
                )
            )
        except (KeyError, ValueError, TypeError, IndexError):
            raise AdapterError(f"{path}:{lineno}: malformed raw detection record") from None
    return records


def best_frame_per_track(records: list[RawDetection]) -> list[RawDetection]:
    """Highest confidence wins; ties keep the earliest frame."""
    best: dict[str, RawDetection] = {}
    for record in records:
        current = best.get(record.track_id)
        if (
            current is None
            or record.confidence > current.confidence
            or (record.confidence == current.confidence and record.frame_index < current.frame_index)
        ):
            best[record.track_id] = record
    return [best[tid] for tid in best]


def export_detections_from_raw(
    raw_path: str | Path, manifest: str | Path, out: str | Path
) -> tuple[int, int]:
    """Translate raw track records into the detections file.

    Returns (records written, records dropped by clipping).
    """
    sizes: dict[str, tuple[int, int]] = {}
    for lineno, record in read_jsonl(manifest):
        try:
            sizes[record["image_id"]] = (int(record["width"]), int(record["height"]))
        except (KeyError, ValueError, TypeError):
            raise AdapterError(f"{manifest}:{lineno}: malformed manifest record") from None

    selected = best_frame_per_track(_parse_raw(raw_path))
    rows = []
    dropped = 0
    for det in selected:
        if det.image_id not in sizes:
            raise AdapterError(f"raw detection {det.track_id!r}: unknown image_id {det.image_id!r}")
        width, height = sizes[det.image_id]
        clipped = clip_bbox(det.bbox, width, height)
        if clipped is None:
            dropped += 1
            continue
        rows.append(
            {
                "crop_id": det.track_id,
                "image_id": det.image_id,
                "bbox": list(clipped),
                "confidence": min(1.0, max(0.0, det.confidence)),
                "keypoints": flags_from_landmarks(det.landmarks),
            }
        )
    write_jsonl(out, rows)
    return len(rows), dropped


def _marker_present(pixels: np.ndarray, color: tuple[int, int, int]) -> bool:
    return bool(np.any(np.all(pixels == np.array(color, dtype=np.uint8), axis=-1)))


def detect_marker_person(image: Image.Image) -> dict | None:
    """Find the staged person (any non-white region) and its marker flags."""
    pixels = np.asarray(image.convert("RGB"))
    non_white = np.any(pixels != 255, axis=-1)
    if not non_white.any():
        return None
    ys, xs = np.nonzero(non_white)
    x0, x1 = int(xs.min()), int(xs.max()) + 1
    y0, y1 = int(ys.min()), int(ys.max()) + 1
    return {
        "bbox": (float(x0), float(y0), float(x1 - x0), float(y1 - y0)),
        "confidence": _MARKER_CONFIDENCE,
        "keypoints": {
            "head": _marker_present(pixels, MARKER_HEAD),
            "l_shoulder": _marker_present(pixels, MARKER_LEFT_SHOULDER),
            "r_shoulder": _marker_present(pixels, MARKER_RIGHT_SHOULDER),
        },
    }


def export_detections_from_markers(manifest: str | Path, out: str | Path) -> tuple[int, int]:
    """Run the marker backend over every manifest image (one person per image).

    Returns (records written, images with no person found).
    """
    base = Path(manifest).parent
    rows = []
    empty = 0
    for lineno, record in read_jsonl(manifest):
        try:
            image_id = record["image_id"]
            uri = record["uri"]
        except KeyError:
            raise AdapterError(f"{manifest}:{lineno}: malformed manifest record") from None
        path = resolve_uri(uri, base)
        try:
            with Image.open(path) as img:
                found = detect_marker_person(img)
        except (OSError, ValueError) as exc:
            raise AdapterError(f"cannot read image {uri!r}: {exc}") from exc
        if found is None:
            empty += 1
            continue
        rows.append(
            {
                "crop_id": f"{image_id}-p1",
                "image_id": image_id,
                "bbox": list(found["bbox"]),
                "confidence": found["confidence"],
                "keypoints": found["keypoints"],
            }
        )
    write_jsonl(out, rows)
    return len(rows), empty
