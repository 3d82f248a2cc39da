"""Job descriptions and the config loader behind `sap-adapters <job>`."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping

import yaml

from .bridge import MllmBridge, ScriptedResponder, UpstreamResponder, parse_mock_spec
from .describe import generate_descriptions
from .detect import export_detections_from_markers, export_detections_from_raw
from .embed import export_crop_embeddings, export_query_embeddings, export_scene_embeddings
from .encoders import make_encoder
from .fileio import AdapterError

JOB_KINDS = ("embed_crops", "embed_scenes", "embed_queries", "detect", "describe", "serve_mock")


@dataclass
class AdapterJob:
    kind: str
    manifest: str | None = None
    detections: str | None = None
    queries: str | None = None
    raw: str | None = None
    out: str | None = None
    model: str = "hash:64"
    device: str | None = None
    backend: str = "raw"  # detect job: raw | marker
    key_by: str = "query_id"  # embed_queries: query_id | text
    endpoint: str | None = None  # describe job target
    upstream: str | None = None  # serve_mock upstream url
    mock: str | None = None  # serve_mock scripted:<path>
    host: str = "127.0.0.1"
    port: int = 0
    timeout: float = 120.0

    def __post_init__(self) -> None:
        if self.kind not in JOB_KINDS:
            raise AdapterError(f"unknown job kind {self.kind!r} (expected one of {JOB_KINDS})")

    def require(self, *names: str) -> None:
        missing = [name for name in names if not getattr(self, name)]
        if missing:
            raise AdapterError(f"job {self.kind!r} needs {', '.join(missing)}")


_JOB_FIELDS = {f.name for f in fields(AdapterJob)}


def load_job(
    kind: str, config_path: str | Path | None = None, overrides: Mapping[str, object] | None = None
) -> AdapterJob:
    values: dict[str, object] = {"kind": kind}
    if config_path is not None:
        with open(config_path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise AdapterError(f"config file {config_path} must hold a mapping")
        for key, value in raw.items():
            if key not in _JOB_FIELDS:
                raise AdapterError(f"unknown config key {key!r}")
            if key != "kind":
                values[key] = value
    for key, value in (overrides or {}).items():
        if key not in _JOB_FIELDS:
            raise AdapterError(f"unknown config key {key!r}")
        if value is not None:
            values[key] = value
    return AdapterJob(**values)


def run_job(job: AdapterJob) -> dict:
    """Execute a batch job and return a small summary (serve_mock blocks)."""
    if job.kind == "embed_scenes":
        job.require("manifest", "out")
        count = export_scene_embeddings(job.manifest, job.out, make_encoder(job.model, job.device))
        return {"written": count}
    if job.kind == "embed_crops":
        job.require("manifest", "detections", "out")
        count = export_crop_embeddings(
            job.manifest, job.detections, job.out, make_encoder(job.model, job.device)
        )
        return {"written": count}
    if job.kind == "embed_queries":
        job.require("queries", "out")
        count = export_query_embeddings(
            job.queries, job.out, make_encoder(job.model, job.device), key_by=job.key_by
        )
        return {"written": count}
    if job.kind == "detect":
        job.require("manifest", "out")
        if job.backend == "marker":
            written, skipped = export_detections_from_markers(job.manifest, job.out)
        elif job.backend == "raw":
            job.require("raw")
            written, skipped = export_detections_from_raw(job.raw, job.manifest, job.out)
        else:
            raise AdapterError(f"unknown detect backend {job.backend!r} (expected raw or marker)")
        return {"written": written, "skipped": skipped}
    if job.kind == "describe":
        job.require("manifest", "detections", "endpoint", "out")
        ok, failed = generate_descriptions(
            job.manifest, job.detections, job.endpoint, job.model, job.out, timeout=job.timeout
        )
        return {"written": ok, "failed": failed}
    raise AdapterError(f"job {job.kind!r} is not a batch job")


def build_bridge(job: AdapterJob) -> MllmBridge:
    scripted: ScriptedResponder | None = None
    upstream: UpstreamResponder | None = None
    if job.mock:
        scripted = parse_mock_spec(job.mock)
    if job.upstream:
        upstream = UpstreamResponder(job.upstream, job.model, timeout=job.timeout)
    return MllmBridge(scripted=scripted, upstream=upstream, host=job.host, port=job.port)
