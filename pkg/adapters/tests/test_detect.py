from __future__ import annotations

import json

import pytest
from PIL import Image

from conftest import stage_person_image, write_jsonl, PERSON_BBOX
from sap_adapters.detect import (
    best_frame_per_track,
    clip_bbox,
    detect_marker_person,
    export_detections_from_markers,
    export_detections_from_raw,
    flags_from_landmarks,
    RawDetection,
)
from sap_adapters.fileio import AdapterError


def landmark_set(head=0.9, left=0.9, right=0.9):
    return {
        "nose": (10.0, 5.0, head),
        "left_shoulder": (5.0, 20.0, left),
        "right_shoulder": (15.0, 20.0, right),
    }


class TestFlags:
    def test_all_visible(self):
        assert flags_from_landmarks(landmark_set()) == {
            "head": True, "l_shoulder": True, "r_shoulder": True,
        }

    def test_head_threshold(self):
        flags = flags_from_landmarks(landmark_set(head=0.4))
        assert flags["head"] is False

    def test_any_head_landmark_counts(self):
        flags = flags_from_landmarks({"left_ear": (1.0, 1.0, 0.8)})
        assert flags == {"head": True, "l_shoulder": False, "r_shoulder": False}

    def test_missing_landmarks_are_invisible(self):
        assert flags_from_landmarks({}) == {
            "head": False, "l_shoulder": False, "r_shoulder": False,
        }


class TestClip:
    def test_inside_untouched(self):
        assert clip_bbox((10, 10, 20, 20), 100, 100) == (10, 10, 20, 20)

    def test_clipped_to_bounds(self):
        assert clip_bbox((-5, 90, 20, 20), 100, 100) == (0, 90, 15, 10)

    def test_fully_outside_dropped(self):
        assert clip_bbox((200, 200, 10, 10), 100, 100) is None


def raw(track, image, frame, conf, **kw):
    return RawDetection(
        track_id=track, image_id=image, frame_index=frame,
        bbox=kw.get("bbox", (10, 10, 20, 30)), confidence=conf,
        landmarks=kw.get("landmarks", landmark_set()),
    )


class TestBestFrame:
    def test_highest_confidence_wins(self):
        picked = best_frame_per_track([raw("t1", "a", 0, 0.7), raw("t1", "b", 1, 0.9)])
        assert [d.image_id for d in picked] == ["b"]

    def test_ties_keep_earliest_frame(self):
        picked = best_frame_per_track([raw("t1", "later", 5, 0.9), raw("t1", "earlier", 2, 0.9)])
        assert [d.image_id for d in picked] == ["earlier"]

    def test_tracks_independent(self):
        picked = best_frame_per_track(
            [raw("t1", "a", 0, 0.5), raw("t2", "b", 0, 0.4), raw("t2", "c", 1, 0.6)]
        )
        assert {d.track_id: d.image_id for d in picked} == {"t1": "a", "t2": "c"}


class TestRawExport:
    def test_translation_roundtrip(self, tmp_path):
        manifest = tmp_path / "m.jsonl"
        write_jsonl(
            manifest,
            [{"image_id": "img-a", "uri": "a.png", "width": 100, "height": 100},
             {"image_id": "img-b", "uri": "b.png", "width": 100, "height": 100}],
        )
        raw_path = tmp_path / "raw.jsonl"
        write_jsonl(
            raw_path,
            [
                {"track_id": "t1", "image_id": "img-a", "frame_index": 0,
                 "bbox": [10, 10, 20, 30], "confidence": 0.6,
                 "landmarks": {"nose": [1, 1, 0.9], "left_shoulder": [1, 2, 0.9]}},
                {"track_id": "t1", "image_id": "img-b", "frame_index": 1,
                 "bbox": [12, 10, 20, 30], "confidence": 0.8,
                 "landmarks": {"nose": [1, 1, 0.9], "left_shoulder": [1, 2, 0.3]}},
                {"track_id": "t2", "image_id": "img-a", "frame_index": 0,
                 "bbox": [-10, 95, 30, 30], "confidence": 0.9,
                 "landmarks": {"nose": [1, 1, 0.9]}},
                {"track_id": "t3", "image_id": "img-a", "frame_index": 0,
                 "bbox": [200, 200, 5, 5], "confidence": 0.9, "landmarks": {}},
            ],
        )
        out = tmp_path / "detections.jsonl"
        written, dropped = export_detections_from_raw(raw_path, manifest, out)
        assert (written, dropped) == (2, 1)  # t3 clips away entirely
        records = {json.loads(l)["crop_id"]: json.loads(l) for l in open(out)}
        # t1 keeps its best frame (img-b) where the left shoulder dipped below 0.5
        assert records["t1"]["image_id"] == "img-b"
        assert records["t1"]["keypoints"] == {"head": True, "l_shoulder": False, "r_shoulder": False}
        # t2 was clipped into bounds
        assert records["t2"]["bbox"] == [0, 95, 20, 5]

    def test_unknown_image_rejected(self, tmp_path):
        manifest = tmp_path / "m.jsonl"
        write_jsonl(manifest, [{"image_id": "img-a", "uri": "a.png", "width": 10, "height": 10}])
        raw_path = tmp_path / "raw.jsonl"
        write_jsonl(raw_path, [{"track_id": "t", "image_id": "ghost", "frame_index": 0,
                                "bbox": [0, 0, 2, 2], "confidence": 0.5, "landmarks": {}}])
        with pytest.raises(AdapterError, match="unknown image_id"):
            export_detections_from_raw(raw_path, manifest, tmp_path / "o.jsonl")


class TestMarkerBackend:
    def test_full_person_all_flags_true(self, tmp_path):
        path = tmp_path / "person.png"
        stage_person_image(path)
        with Image.open(path) as img:
            found = detect_marker_person(img)
        assert found is not None
        assert found["bbox"] == PERSON_BBOX
        assert found["keypoints"] == {"head": True, "l_shoulder": True, "r_shoulder": True}

    def test_cropped_at_neck_head_false(self, tmp_path):
        path = tmp_path / "headless.png"
        stage_person_image(path, head=False)
        with Image.open(path) as img:
            found = detect_marker_person(img)
        assert found["keypoints"]["head"] is False

    def test_empty_scene_none(self, tmp_path):
        with Image.open(self._empty(tmp_path)) as img:
            assert detect_marker_person(img) is None

    @staticmethod
    def _empty(tmp_path):
        from conftest import stage_empty_image

        path = tmp_path / "empty.png"
        stage_empty_image(path)
        return path

    def test_export_over_manifest(self, staged_gallery, tmp_path):
        _, manifest = staged_gallery
        out = tmp_path / "detections.jsonl"
        written, empty = export_detections_from_markers(manifest, out)
        assert (written, empty) == (2, 1)  # img-c is empty
        records = [json.loads(l) for l in open(out)]
        assert [r["crop_id"] for r in records] == ["img-a-p1", "img-b-p1"]
        assert records[0]["keypoints"]["head"] is True
        assert records[1]["keypoints"]["head"] is False
