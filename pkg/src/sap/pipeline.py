"""End-to-end composition: config, the two-stage query path, benchmarking, and
the description-generation prompt for the dataset-builder path.

Configuration precedence is CLI flags over environment (SAP_ENDPOINT,
SAP_MODEL) over the config file over defaults, so a benchmark run has one
reproducible source of truth.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import yaml

from . import evaluation
from .embeddings import EmbeddingMatrix, load_embeddings, normalize
from .evaluation import DEFAULT_IOU_THRESHOLD, EvalReport, GroundTruth
from .gallery import Bbox, Gallery, GalleryImage, load_manifest
from .ranker import (
    DEFAULT_MAX_OUTPUT_TOKENS,
    Attachment,
    HttpRankerClient,
    Overlay,
    PromptBundle,
    PromptVariant,
    RankedResult,
    RankerClient,
    coarse_result,
    rank_with_fallback,
)
from .retrieval import (
    DEFAULT_K,
    ScoredCandidate,
    TextQuery,
    full_ranking,
    load_queries,
    map_to_scene,
    score_gallery,
    top_k,
)

DESCRIPTION_PROMPT = (
    "Generate a description of the individual within the red bounding box and the "
    "connection with the surroundings. Ensure that the description is a natural, "
    "fluent paragraph (under 50 words) that a real witness would actually say to "
    "police or friends when trying to help find this exact person. Do not include "
    "text details or labels, and strictly avoid any punctuation other than commas "
    "and periods."
)

ENV_ENDPOINT = "SAP_ENDPOINT"
ENV_MODEL = "SAP_MODEL"


class ConfigError(ValueError):
    """Invalid or inconsistent pipeline configuration."""


@dataclass
class PipelineConfig:
    manifest: str | None = None
    detections: str | None = None
    crop_embeddings: str | None = None
    scene_embeddings: str | None = None
    text_embeddings: str | None = None
    queries: str | None = None
    k: int = DEFAULT_K
    variant: PromptVariant = PromptVariant.BEP
    endpoint: str = ""
    model: str = ""
    iou_threshold: float = DEFAULT_IOU_THRESHOLD
    dedup_threshold: float = 0.95
    in_flight_limit: int = 4
    retry_count: int = 0
    max_output_tokens: int = DEFAULT_MAX_OUTPUT_TOKENS

    def __post_init__(self) -> None:
        self.variant = PromptVariant(self.variant)
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if not 0.0 <= self.iou_threshold <= 1.0:
            raise ConfigError(f"iou_threshold {self.iou_threshold} outside [0, 1]")
        if not 0.0 <= self.dedup_threshold <= 1.0:
            raise ConfigError(f"dedup_threshold {self.dedup_threshold} outside [0, 1]")
        if self.in_flight_limit < 1:
            raise ConfigError(f"in_flight_limit must be >= 1, got {self.in_flight_limit}")
        if self.retry_count < 0:
            raise ConfigError(f"retry_count must be >= 0, got {self.retry_count}")


_CONFIG_FIELDS = {f.name for f in fields(PipelineConfig)}


def load_config(
    path: str | Path | None = None,
    overrides: Mapping[str, object] | None = None,
    *,
    env: Mapping[str, str] | None = None,
) -> PipelineConfig:
    """Build a PipelineConfig from file, environment, and explicit overrides."""
    values: dict[str, object] = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
        for key, value in raw.items():
            if key not in _CONFIG_FIELDS:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = value
    env = os.environ if env is None else env
    if env.get(ENV_ENDPOINT):
        values["endpoint"] = env[ENV_ENDPOINT]
    if env.get(ENV_MODEL):
        values["model"] = env[ENV_MODEL]
    for key, value in (overrides or {}).items():
        if key not in _CONFIG_FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        if value is not None:
            values[key] = value
    try:
        return PipelineConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


@dataclass
class QueryTrace:
    timings: dict[str, float] = field(default_factory=dict)
    crops_scored: int = 0
    ranker_calls: int = 0
    rerank_applied: bool = False
    raw_ranker_text: str = ""


@dataclass(frozen=True)
class BenchmarkReport:
    coarse: EvalReport
    reranked: EvalReport
    k: int
    variant: PromptVariant

    def deltas(self) -> dict:
        return {
            "r_at": {k: self.reranked.r_at[k] - self.coarse.r_at[k] for k in sorted(self.coarse.r_at)},
            "map": self.reranked.map_score - self.coarse.map_score,
        }

    def to_dict(self) -> dict:
        delta = self.deltas()
        return {
            "k": self.k,
            "variant": self.variant.value,
            "coarse": self.coarse.to_dict(),
            "reranked": self.reranked.to_dict(),
            "delta": {
                "r_at": {str(k): delta["r_at"][k] for k in sorted(delta["r_at"])},
                "map": delta["map"],
            },
        }


class _CountingClient:
    def __init__(self, inner: RankerClient) -> None:
        self.inner = inner
        self.calls = 0

    def rank(self, bundle: PromptBundle) -> str:
        self.calls += 1
        return self.inner.rank(bundle)


class Pipeline:
    """Immutable gallery + embeddings + ranker client, ready to serve queries.

    Coarse scores are cached per query_id, so candidate-size sweeps and
    prompt-variant comparisons share one stage-one pass.
    """

    def __init__(
        self,
        gallery: Gallery,
        crop_embs: EmbeddingMatrix,
        text_embs: EmbeddingMatrix,
        client: RankerClient | None = None,
        *,
        k: int = DEFAULT_K,
        variant: PromptVariant = PromptVariant.BEP,
        iou_threshold: float = DEFAULT_IOU_THRESHOLD,
        in_flight_limit: int = 4,
        retry_count: int = 0,
        queries: Sequence[TextQuery] | None = None,
        gt: GroundTruth | None = None,
    ) -> None:
        self.gallery = gallery
        self.crop_embs = crop_embs
        self.text_embs = text_embs
        self.client = client
        self.k = k
        self.variant = PromptVariant(variant)
        self.iou_threshold = iou_threshold
        self.in_flight_limit = in_flight_limit
        self.retry_count = retry_count
        self.queries = list(queries) if queries is not None else []
        self.gt: GroundTruth = dict(gt) if gt is not None else {}
        self._coarse_cache: dict[str, list[ScoredCandidate]] = {}

    @classmethod
    def from_config(cls, config: PipelineConfig, client: RankerClient | None = None) -> Pipeline:
        if not config.manifest or not config.detections:
            raise ConfigError("manifest and detections paths are required")
        if not config.crop_embeddings or not config.text_embeddings:
            raise ConfigError("crop and text embedding paths are required")
        gallery = load_manifest(config.manifest, config.detections)
        crop_embs = normalize(load_embeddings(config.crop_embeddings))
        text_embs = normalize(load_embeddings(config.text_embeddings))
        queries: Sequence[TextQuery] = []
        gt: GroundTruth = {}
        if config.queries:
            queries, gt = load_queries(config.queries)
        if client is None and config.endpoint:
            client = HttpRankerClient(
                config.endpoint, config.model, max_output_tokens=config.max_output_tokens
            )
        return cls(
            gallery,
            crop_embs,
            text_embs,
            client,
            k=config.k,
            variant=config.variant,
            iou_threshold=config.iou_threshold,
            in_flight_limit=config.in_flight_limit,
            retry_count=config.retry_count,
            queries=queries,
            gt=gt,
        )

    def coarse_scores(self, query: TextQuery) -> list[ScoredCandidate]:
        cached = self._coarse_cache.get(query.query_id)
        if cached is None:
            cached = score_gallery(query, self.text_embs, self.crop_embs, self.gallery)
            self._coarse_cache[query.query_id] = cached
        return cached

    def run_query(
        self,
        query: TextQuery,
        *,
        k: int | None = None,
        variant: PromptVariant | None = None,
    ) -> tuple[RankedResult, QueryTrace]:
        """Full two-stage path: score, select, map, prompt, rank, merge.

        Ranker failures never fail the query; the coarse order is the floor.
        """
        k = self.k if k is None else k
        variant = self.variant if variant is None else PromptVariant(variant)
        trace = QueryTrace()

        t0 = time.perf_counter()
        scores = self.coarse_scores(query)
        trace.crops_scored = len(scores)
        coarse_ids = [c.crop_id for c in full_ranking(scores)]
        trace.timings["coarse"] = time.perf_counter() - t0

        if not coarse_ids or self.client is None:
            result = coarse_result(coarse_ids, query_id=query.query_id)
            trace.rerank_applied = False
            return result, trace

        t1 = time.perf_counter()
        cands = top_k(scores, k)
        scene_cands = map_to_scene(cands, self.gallery)
        trace.timings["map"] = time.perf_counter() - t1

        t2 = time.perf_counter()
        counting = _CountingClient(self.client)
        result = rank_with_fallback(
            counting,
            variant,
            scene_cands,
            query.text,
            coarse_ids,
            query_id=query.query_id,
            retries=self.retry_count,
        )
        trace.timings["rerank"] = time.perf_counter() - t2
        trace.ranker_calls = counting.calls
        trace.rerank_applied = result.rerank_applied
        trace.raw_ranker_text = result.raw_ranker_text
        return result, trace

    def run_all(
        self,
        queries: Sequence[TextQuery] | None = None,
        *,
        k: int | None = None,
        variant: PromptVariant | None = None,
    ) -> list[RankedResult]:
        """Run every query; ranker calls are bounded by the in-flight limit.

        Results are returned in query order and are independent of scheduling.
        """
        queries = self.queries if queries is None else queries
        if not queries:
            raise ValueError("no queries")

        def one(query: TextQuery) -> RankedResult:
            result, _ = self.run_query(query, k=k, variant=variant)
            return result

        if self.in_flight_limit == 1 or len(queries) == 1:
            return [one(q) for q in queries]
        with ThreadPoolExecutor(max_workers=self.in_flight_limit) as pool:
            return list(pool.map(one, queries))

    def coarse_results(self, queries: Sequence[TextQuery] | None = None) -> list[RankedResult]:
        queries = self.queries if queries is None else queries
        if not queries:
            raise ValueError("no queries")
        out = []
        for query in queries:
            order = [c.crop_id for c in full_ranking(self.coarse_scores(query))]
            out.append(coarse_result(order, query_id=query.query_id))
        return out

    def evaluate(
        self,
        *,
        k: int | None = None,
        variant: PromptVariant | None = None,
        queries: Sequence[TextQuery] | None = None,
        gt: GroundTruth | None = None,
    ) -> EvalReport:
        """Reranked-pipeline metrics; the entry point ablation drivers call."""
        queries = self.queries if queries is None else queries
        gt = self.gt if gt is None else gt
        results = self.run_all(queries, k=k, variant=variant)
        return evaluation.evaluate(
            results, gt, gallery=self.gallery, iou_threshold=self.iou_threshold
        )

    def benchmark(
        self,
        *,
        k: int | None = None,
        variant: PromptVariant | None = None,
    ) -> BenchmarkReport:
        """Coarse-only vs reranked reports from a single stage-one pass."""
        k = self.k if k is None else k
        variant = self.variant if variant is None else PromptVariant(variant)
        coarse_report = evaluation.evaluate(
            self.coarse_results(), self.gt, gallery=self.gallery, iou_threshold=self.iou_threshold
        )
        reranked_report = evaluation.evaluate(
            self.run_all(k=k, variant=variant),
            self.gt,
            gallery=self.gallery,
            iou_threshold=self.iou_threshold,
        )
        return BenchmarkReport(coarse=coarse_report, reranked=reranked_report, k=k, variant=variant)


def run_query(
    config: PipelineConfig, query: TextQuery, client: RankerClient | None = None
) -> tuple[RankedResult, QueryTrace]:
    return Pipeline.from_config(config, client).run_query(query)


def run_benchmark(config: PipelineConfig, client: RankerClient | None = None) -> BenchmarkReport:
    return Pipeline.from_config(config, client).benchmark()


def save_results(results: Sequence[RankedResult], path: str | Path) -> None:
    """Write per-query ranked results as line-delimited JSON."""
    import json

    with open(path, "w", encoding="utf-8") as fh:
        for result in results:
            fh.write(
                json.dumps(
                    {
                        "query_id": result.query_id,
                        "final_order": list(result.final_order),
                        "rerank_applied": result.rerank_applied,
                        "raw_ranker_text": result.raw_ranker_text,
                    }
                )
                + "\n"
            )


def load_results(path: str | Path) -> list[RankedResult]:
    import json

    results: list[RankedResult] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                results.append(
                    RankedResult(
                        query_id=record["query_id"],
                        final_order=tuple(record["final_order"]),
                        rerank_applied=record["rerank_applied"],
                        raw_ranker_text=record.get("raw_ranker_text", ""),
                    )
                )
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed result record: {exc}") from None
    return results


def build_description_prompt(image: GalleryImage, bbox: Bbox) -> PromptBundle:
    """Single-image red-box bundle carrying the description-generation prompt.

    Execution against a live model happens in the adapter layer; this stays
    pixel-free.
    """
    x, y, w, h = bbox
    if x < 0 or y < 0 or w <= 0 or h <= 0 or x + w > image.width or y + h > image.height:
        raise ValueError(
            f"bbox {bbox} out of bounds for image {image.image_id!r} "
            f"({image.width}x{image.height})"
        )
    return PromptBundle(
        variant=PromptVariant.BOP,
        text_blocks=(DESCRIPTION_PROMPT,),
        attachments=(Attachment(uri=image.uri, overlay=Overlay(bbox=bbox)),),
    )
