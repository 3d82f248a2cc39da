"""Scene-aware two-stage text-to-person retrieval engine."""

from .embeddings import EmbeddingMatrix, cosine_similarity, load_embeddings, normalize, save_embeddings
from .evaluation import CostModel, EvalReport, estimate_cost, evaluate, iou, recall_at_k
from .gallery import (
    Gallery,
    GalleryImage,
    KeypointFlags,
    PersonCrop,
    apply_filter,
    completeness_filter,
    dedup,
    load_manifest,
    save_gallery,
)
from .pipeline import Pipeline, PipelineConfig, build_description_prompt, load_config
from .ranker import (
    Permutation,
    ParseFailure,
    PromptBundle,
    PromptVariant,
    RankedResult,
    apply_rerank,
    build_prompt,
    parse_ranking,
    rank_with_fallback,
    repair_ranking,
)
from .retrieval import CandidateSet, SceneCandidate, ScoredCandidate, TextQuery, map_to_scene, score_gallery, top_k

__version__ = "0.1.0"
