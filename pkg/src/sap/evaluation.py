"""Retrieval metrics (R@k, mAP), ground-truth matching, ablation drivers, and
the two-stage vs gallery-wide cost model.

Queries carry a single relevant target, so per-query average precision is
1/rank of the first correct hit. Matching against full-scene ground truth is
same-image AND IoU >= threshold (0.5 by default).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping, Sequence

from .gallery import Bbox, Gallery, PersonCrop
from .ranker import PromptVariant, RankedResult

DEFAULT_IOU_THRESHOLD = 0.5
REPORTED_KS = (1, 5, 10)
# A first hit beyond the deepest reported k counts as a miss for mAP, so the
# rank-{1,3,12} reference fixture yields mean([1, 1/3, 0]) rather than
# mean([1, 1/3, 1/12]).
DEFAULT_AP_CUTOFF = max(REPORTED_KS)

Target = tuple[str, Bbox]  # (image_id, bbox)
GroundTruth = Mapping[str, Target]


def iou(a: Bbox, b: Bbox) -> float:
    """Intersection over union of two (x, y, w, h) boxes; 0 when disjoint."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def is_match(crop: PersonCrop, target: Target, iou_threshold: float = DEFAULT_IOU_THRESHOLD) -> bool:
    """A crop hits the target iff it comes from the target's image and overlaps it."""
    image_id, bbox = target
    return crop.source_image_id == image_id and iou(crop.bbox, bbox) >= iou_threshold


def first_match_rank(
    order: Sequence[str],
    target: Target,
    gallery: Gallery,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
) -> int | None:
    """1-based rank of the first crop matching the target, or None."""
    for rank, crop_id in enumerate(order, start=1):
        if is_match(gallery.crop(crop_id), target, iou_threshold):
            return rank
    return None


def _ranks(
    results: Sequence[RankedResult],
    gt: GroundTruth,
    gallery: Gallery,
    iou_threshold: float,
) -> dict[str, int | None]:
    ranks: dict[str, int | None] = {}
    for result in results:
        if result.query_id not in gt:
            raise KeyError(f"query {result.query_id!r} missing from ground truth")
        ranks[result.query_id] = first_match_rank(
            result.final_order, gt[result.query_id], gallery, iou_threshold
        )
    return ranks


def recall_at_k(
    results: Sequence[RankedResult],
    gt: GroundTruth,
    k: int,
    *,
    gallery: Gallery,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
) -> float:
    """Percentage of queries whose first correct hit lands within the top k."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not results:
        raise ValueError("no queries")
    ranks = _ranks(results, gt, gallery, iou_threshold)
    hits = sum(1 for r in ranks.values() if r is not None and r <= k)
    return 100.0 * hits / len(ranks)


def average_precision(
    result: RankedResult,
    target: Target,
    *,
    gallery: Gallery,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    cutoff: int | None = DEFAULT_AP_CUTOFF,
) -> float:
    """With one relevant target, AP is the reciprocal of the first correct rank.

    A first hit deeper than `cutoff` (or no hit at all) scores 0; pass
    cutoff=None for the untruncated reciprocal rank.
    """
    rank = first_match_rank(result.final_order, target, gallery, iou_threshold)
    if rank is None or (cutoff is not None and rank > cutoff):
        return 0.0
    return 1.0 / rank


@dataclass(frozen=True)
class EvalReport:
    r_at: dict[int, float]  # k -> percentage in [0, 100]
    map_score: float  # percentage in [0, 100]
    per_query_ranks: dict[str, int | None]

    def __post_init__(self) -> None:
        for k, value in self.r_at.items():
            if not 0.0 <= value <= 100.0:
                raise ValueError(f"R@{k}={value} outside [0, 100]")
        if not 0.0 <= self.map_score <= 100.0:
            raise ValueError(f"mAP={self.map_score} outside [0, 100]")
        ks = sorted(self.r_at)
        for lo, hi in zip(ks, ks[1:]):
            if self.r_at[lo] > self.r_at[hi]:
                raise ValueError(f"R@{lo} > R@{hi} violates recall monotonicity")

    def to_dict(self) -> dict:
        return {
            "r_at": {str(k): self.r_at[k] for k in sorted(self.r_at)},
            "map": self.map_score,
            "per_query_ranks": {
                qid: self.per_query_ranks[qid] for qid in sorted(self.per_query_ranks)
            },
        }


def evaluate(
    results: Sequence[RankedResult],
    gt: GroundTruth,
    *,
    gallery: Gallery,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    ks: Sequence[int] = REPORTED_KS,
) -> EvalReport:
    """Aggregate R@k and mAP over per-query ranked results."""
    if not results:
        raise ValueError("no queries")
    ranks = _ranks(results, gt, gallery, iou_threshold)
    n = len(ranks)
    r_at = {
        k: 100.0 * sum(1 for r in ranks.values() if r is not None and r <= k) / n
        for k in ks
    }
    cutoff = max(ks)
    map_score = 100.0 * sum(1.0 / r for r in ranks.values() if r is not None and r <= cutoff) / n
    return EvalReport(r_at=r_at, map_score=map_score, per_query_ranks=ranks)


class CostMode(str, Enum):
    TWO_STAGE = "two_stage"
    GALLERY_WIDE_MLLM = "gallery_wide_mllm"
    DOMAIN_ONLY = "domain_only"


@dataclass(frozen=True)
class CostModel:
    """Per-query time model: N gallery images, K candidates, per-image costs
    mu_s (domain-specific stage) and mu_m (MLLM stage).

    M is the gallery-wide-MLLM candidate set size; it defaults to K, keeping
    both accountings available without preferring either.
    """

    mu_s: float
    mu_m: float
    n: int
    k: int
    m: int | None = None

    def __post_init__(self) -> None:
        if self.mu_s < 0 or self.mu_m < 0 or self.n < 0 or self.k < 0:
            raise ValueError("cost model parameters must be nonnegative")
        if self.k > self.n:
            raise ValueError(f"K={self.k} exceeds gallery size N={self.n}")
        if self.m is not None and self.m < 0:
            raise ValueError("M must be nonnegative")

    @property
    def m_effective(self) -> int:
        return self.k if self.m is None else self.m


def estimate_cost(cm: CostModel, mode: CostMode | str) -> float:
    """Closed-form per-query time for the selected serving strategy."""
    mode = CostMode(mode)
    if mode is CostMode.TWO_STAGE:
        return cm.n * cm.mu_s + cm.k * cm.mu_m
    if mode is CostMode.GALLERY_WIDE_MLLM:
        return cm.n * cm.mu_m + cm.m_effective * cm.mu_m
    return cm.n * cm.mu_s


def sweep_candidate_size(pipeline, k_values: Iterable[int]) -> list[tuple[int, EvalReport]]:
    """Two-stage evaluation per candidate size, everything else held fixed.

    Duplicate K values collapse to a single row (first occurrence wins).
    """
    seen: set[int] = set()
    rows: list[tuple[int, EvalReport]] = []
    for k in k_values:
        if k < 1:
            raise ValueError(f"candidate sizes must be positive, got {k}")
        if k in seen:
            continue
        seen.add(k)
        rows.append((k, pipeline.evaluate(k=k)))
    return rows


def compare_prompt_variants(
    pipeline, variants: Sequence[PromptVariant | str]
) -> list[tuple[PromptVariant, EvalReport]]:
    """One report per prompt variant, sharing the same coarse stage."""
    if not variants:
        raise ValueError("variant list must be non-empty")
    return [(PromptVariant(v), pipeline.evaluate(variant=PromptVariant(v))) for v in variants]
