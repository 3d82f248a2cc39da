"""Synthetic gallery construction with exact control over coarse ranks.

Each crop gets its own basis direction, so a query's cosine against crop j is
proportional to the query vector's j-th weight. Assigning strictly decreasing
weights along a chosen crop order pins the entire coarse ranking, which lets
fixtures place each query's ground-truth crop at an exact coarse rank.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from sap.embeddings import EmbeddingMatrix
from sap.gallery import Gallery, GalleryImage, KeypointFlags, PersonCrop
from sap.retrieval import TextQuery

ALL_VISIBLE = KeypointFlags(head_visible=True, left_shoulder_visible=True, right_shoulder_visible=True)


@dataclass
class Fixture:
    gallery: Gallery
    crop_embs: EmbeddingMatrix
    scene_embs: EmbeddingMatrix
    text_embs: EmbeddingMatrix
    queries: list[TextQuery]
    gt: dict[str, tuple[str, tuple[int, int, int, int]]]
    gt_rank: dict[str, int]  # query_id -> intended coarse rank of the target


def image_id(i: int) -> str:
    return f"img-{i:04d}"


def crop_id(i: int) -> str:
    return f"crop-{i:04d}"


def build_fixture(gt_ranks: Sequence[int], n_images: int, seed: int = 0) -> Fixture:
    """One crop per image; query i's target is crop i placed at coarse rank
    gt_ranks[i]. Requires len(gt_ranks) <= n_images and ranks <= n_images."""
    if len(gt_ranks) > n_images:
        raise ValueError("need at least one image per query")
    if any(r < 1 or r > n_images for r in gt_ranks):
        raise ValueError("ranks must lie in 1..n_images")
    rng = np.random.default_rng(seed)

    images = tuple(
        GalleryImage(image_id=image_id(i), uri=f"file:///gallery/{image_id(i)}.jpg", width=640, height=480)
        for i in range(n_images)
    )
    crops = tuple(
        PersonCrop(
            crop_id=crop_id(i),
            source_image_id=image_id(i),
            bbox=(100, 80, 120, 240),
            confidence=0.9,
            keypoints=ALL_VISIBLE,
        )
        for i in range(n_images)
    )
    gallery = Gallery(images=images, crops=crops)

    dim = n_images
    crop_embs = EmbeddingMatrix(
        dim=dim, keys=tuple(crop_id(i) for i in range(n_images)), vectors=np.eye(n_images, dtype=np.float32)
    )
    scene_embs = EmbeddingMatrix(
        dim=dim, keys=tuple(image_id(i) for i in range(n_images)), vectors=np.eye(n_images, dtype=np.float32)
    )

    queries: list[TextQuery] = []
    gt: dict[str, tuple[str, tuple[int, int, int, int]]] = {}
    gt_rank: dict[str, int] = {}
    text_keys: list[str] = []
    text_rows = np.zeros((len(gt_ranks), dim), dtype=np.float32)
    for qi, rank in enumerate(gt_ranks):
        qid = f"q-{qi:03d}"
        # Crop order for this query: target at position `rank`, filled with a
        # query-specific rotation of the remaining crops.
        others = [c for c in range(n_images) if c != qi]
        shift = int(rng.integers(0, len(others))) if others else 0
        rotated = others[shift:] + others[:shift]
        order = rotated[: rank - 1] + [qi] + rotated[rank - 1 :]
        for position, crop_index in enumerate(order):
            text_rows[qi, crop_index] = 1.0 - 0.001 * position
        queries.append(
            TextQuery(query_id=qid, text=f"person {qi} in a distinctive outfit near landmark {qi}")
        )
        text_keys.append(qid)
        gt[qid] = (image_id(qi), (100, 80, 120, 240))
        gt_rank[qid] = rank

    text_embs = EmbeddingMatrix(dim=dim, keys=tuple(text_keys), vectors=text_rows)
    return Fixture(
        gallery=gallery,
        crop_embs=crop_embs,
        scene_embs=scene_embs,
        text_embs=text_embs,
        queries=queries,
        gt=gt,
        gt_rank=gt_rank,
    )


def ranks_with_recall(n_queries: int, r_at: dict[int, float], beyond: int = 15) -> list[int]:
    """Rank assignments realizing exact R@k targets (fractions of n_queries).

    r_at maps k to the number of queries whose target rank must be <= k;
    remaining queries get rank `beyond`.
    """
    ranks: list[int] = []
    ks = sorted(r_at)
    previous_count = 0
    previous_k = 0
    for k in ks:
        count = r_at[k]
        if count < previous_count:
            raise ValueError("recall counts must be non-decreasing in k")
        for i in range(count - previous_count):
            # spread ranks across (previous_k, k]
            ranks.append(previous_k + 1 + i % (k - previous_k))
        previous_count = count
        previous_k = k
    while len(ranks) < n_queries:
        ranks.append(beyond)
    if len(ranks) != n_queries:
        raise ValueError("counts exceed n_queries")
    return ranks
