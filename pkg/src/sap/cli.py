"""The `sap` command-line interface.

Every subcommand accepts --config; flags override environment variables
(SAP_ENDPOINT, SAP_MODEL), which override the config file.
"""

from __future__ import annotations

import json
import sys

import click

from . import evaluation
from .embeddings import EmbeddingError, load_embeddings
from .gallery import apply_filter, dedup, load_manifest, save_detections, save_gallery
from .mock_ranker import MockRankerServer, OracleTargets
from .pipeline import (
    Pipeline,
    build_description_prompt,
    load_config,
    load_results,
    save_results,
)
from .ranker import PromptVariant
from .retrieval import TextQuery, load_queries, top_k


def _fmt_pct(value: float) -> str:
    return f"{value:.2f}"


def _report_rows(report: evaluation.EvalReport) -> str:
    cells = [f"R@{k} {_fmt_pct(report.r_at[k])}" for k in sorted(report.r_at)]
    cells.append(f"mAP {_fmt_pct(report.map_score)}")
    return "  ".join(cells)


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="Pipeline config file (YAML or JSON).")
@click.pass_context
def main(ctx: click.Context, config_path: str | None) -> None:
    """Scene-aware two-stage text-to-person retrieval."""
    ctx.obj = {"config_path": config_path}


def _config(ctx: click.Context, **overrides):
    return load_config(ctx.obj.get("config_path"), overrides)


@main.command()
@click.option("--manifest", required=True, type=click.Path())
@click.option("--detections", required=True, type=click.Path())
@click.option("--lenient", is_flag=True, help="Log and skip invalid records instead of aborting.")
@click.option("--out-manifest", type=click.Path(), default=None)
@click.option("--out-detections", type=click.Path(), default=None)
def ingest(manifest: str, detections: str, lenient: bool,
           out_manifest: str | None, out_detections: str | None) -> None:
    """Validate a gallery manifest and detections file."""
    gallery = load_manifest(manifest, detections, lenient=lenient)
    click.echo(f"images={len(gallery.images)} crops={len(gallery.crops)}")
    if out_manifest and out_detections:
        save_gallery(gallery, out_manifest, out_detections)
        click.echo(f"wrote {out_manifest} and {out_detections}")


@main.command("filter")
@click.option("--manifest", required=True, type=click.Path())
@click.option("--detections", required=True, type=click.Path())
@click.option("--out-detections", required=True, type=click.Path())
def filter_cmd(manifest: str, detections: str, out_detections: str) -> None:
    """Drop crops whose head or both shoulders are not visible."""
    gallery = load_manifest(manifest, detections)
    filtered = apply_filter(gallery)
    save_detections(filtered, out_detections)
    click.echo(f"kept {len(filtered.crops)} of {len(gallery.crops)} crops")


@main.command("dedup")
@click.option("--manifest", required=True, type=click.Path())
@click.option("--detections", required=True, type=click.Path())
@click.option("--crop-emb", "crop_emb", required=True, type=click.Path())
@click.option("--scene-emb", "scene_emb", required=True, type=click.Path())
@click.option("--threshold", type=float, default=None, help="Cosine threshold (default 0.95).")
@click.option("--out-detections", required=True, type=click.Path())
@click.pass_context
def dedup_cmd(ctx: click.Context, manifest: str, detections: str, crop_emb: str,
              scene_emb: str, threshold: float | None, out_detections: str) -> None:
    """Discard crops near-duplicate in both crop and scene embedding space."""
    config = _config(ctx, dedup_threshold=threshold)
    gallery = load_manifest(manifest, detections)
    deduped = dedup(
        gallery,
        load_embeddings(crop_emb),
        load_embeddings(scene_emb),
        threshold=config.dedup_threshold,
    )
    save_detections(deduped, out_detections)
    click.echo(f"kept {len(deduped.crops)} of {len(gallery.crops)} crops")


@main.group()
def emb() -> None:
    """Embedding file utilities."""


@emb.command("check")
@click.argument("path", type=click.Path())
def emb_check(path: str) -> None:
    """Validate an embedding file and print its header and norm range."""
    try:
        matrix = load_embeddings(path)
    except (EmbeddingError, OSError) as exc:
        click.echo(f"invalid: {exc}", err=True)
        sys.exit(1)
    import numpy as np

    if len(matrix):
        norms = np.linalg.norm(matrix.vectors.astype(np.float64), axis=1)
        norm_range = f"norms [{norms.min():.6f}, {norms.max():.6f}]"
    else:
        norm_range = "no vectors"
    click.echo(f"ok: dim={matrix.dim} count={len(matrix)} {norm_range}")


@main.command("query")
@click.option("--text", default=None, help="Query text with a precomputed embedding.")
@click.option("--query-id", default=None, help="Pick a query from the configured queries file.")
@click.option("-k", "--k", type=int, default=None)
@click.pass_context
def query_cmd(ctx: click.Context, text: str | None, query_id: str | None, k: int | None) -> None:
    """Stage-one retrieval: print the top-K candidates as (rank, crop_id, score)."""
    config = _config(ctx, k=k)
    engine = Pipeline.from_config(config)
    if query_id is not None:
        matches = [q for q in engine.queries if q.query_id == query_id]
        if not matches:
            raise click.ClickException(f"query {query_id!r} not found in queries file")
        query = matches[0]
    elif text is not None:
        if text not in engine.text_embs:
            raise click.ClickException(f"no precomputed embedding for text {text!r}")
        query = TextQuery(query_id=text, text=text, text_embedding_key=text)
    else:
        raise click.ClickException("pass --text or --query-id")
    cands = top_k(engine.coarse_scores(query), config.k)
    for rank, cand in enumerate(cands.candidates, start=1):
        click.echo(f"{rank}\t{cand.crop_id}\t{cand.score:.6f}")


@main.command("rerank")
@click.option("--variant", type=click.Choice([v.value for v in PromptVariant]), default=None)
@click.option("--k", type=int, default=None)
@click.option("--endpoint", default=None)
@click.option("--model", default=None)
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Write per-query final rankings as JSONL.")
@click.pass_context
def rerank_cmd(ctx: click.Context, variant: str | None, k: int | None,
               endpoint: str | None, model: str | None, out_path: str | None) -> None:
    """Run the full two-stage pipeline over the configured queries."""
    config = _config(ctx, variant=variant, k=k, endpoint=endpoint, model=model)
    engine = Pipeline.from_config(config)
    if not engine.queries:
        raise click.ClickException("config must point at a queries file")
    results = engine.run_all()
    applied = sum(1 for r in results if r.rerank_applied)
    for result in results:
        head = ", ".join(result.final_order[: config.k])
        click.echo(f"{result.query_id}\trerank={'yes' if result.rerank_applied else 'no'}\t[{head}]")
    click.echo(f"reranked {applied}/{len(results)} queries")
    if out_path:
        save_results(results, out_path)
        click.echo(f"wrote {out_path}")


@main.command("eval")
@click.option("--results", "results_path", required=True, type=click.Path())
@click.option("--queries", "queries_path", required=True, type=click.Path())
@click.option("--manifest", required=True, type=click.Path())
@click.option("--detections", required=True, type=click.Path())
@click.option("--iou", "iou_threshold", type=float, default=None)
@click.option("--json", "as_json", is_flag=True, help="Emit the machine-readable report only.")
@click.pass_context
def eval_cmd(ctx: click.Context, results_path: str, queries_path: str, manifest: str,
             detections: str, iou_threshold: float | None, as_json: bool) -> None:
    """Score saved rankings against ground truth (R@k and mAP)."""
    config = _config(ctx, iou_threshold=iou_threshold)
    gallery = load_manifest(manifest, detections)
    _, gt = load_queries(queries_path)
    results = load_results(results_path)
    report = evaluation.evaluate(
        results, gt, gallery=gallery, iou_threshold=config.iou_threshold
    )
    if as_json:
        click.echo(json.dumps(report.to_dict(), sort_keys=True, indent=2))
    else:
        click.echo(_report_rows(report))


@main.command("ablate")
@click.option("--sweep-k", "sweep_k", default=None,
              help="Comma-separated candidate sizes, e.g. 1,2,3,5,7,10,15,20.")
@click.option("--variants", default=None, help="Comma-separated prompt variants, e.g. np,bop,bep.")
@click.option("--endpoint", default=None)
@click.option("--model", default=None)
@click.pass_context
def ablate_cmd(ctx: click.Context, sweep_k: str | None, variants: str | None,
               endpoint: str | None, model: str | None) -> None:
    """Candidate-size sweep or prompt-variant comparison over the configured queries."""
    if (sweep_k is None) == (variants is None):
        raise click.ClickException("pass exactly one of --sweep-k or --variants")
    config = _config(ctx, endpoint=endpoint, model=model)
    engine = Pipeline.from_config(config)
    if sweep_k is not None:
        k_values = [int(v) for v in sweep_k.split(",") if v.strip()]
        rows = evaluation.sweep_candidate_size(engine, k_values)
        click.echo("K\tR@1\tR@5\tR@10\tmAP")
        for k, report in rows:
            click.echo(
                f"{k}\t{_fmt_pct(report.r_at[1])}\t{_fmt_pct(report.r_at[5])}"
                f"\t{_fmt_pct(report.r_at[10])}\t{_fmt_pct(report.map_score)}"
            )
    else:
        names = [v.strip() for v in variants.split(",") if v.strip()]
        rows = evaluation.compare_prompt_variants(engine, names)
        click.echo("variant\tR@1\tR@5\tR@10\tmAP")
        for variant, report in rows:
            click.echo(
                f"{variant.value}\t{_fmt_pct(report.r_at[1])}\t{_fmt_pct(report.r_at[5])}"
                f"\t{_fmt_pct(report.r_at[10])}\t{_fmt_pct(report.map_score)}"
            )


@main.command("run-benchmark")
@click.option("--k", type=int, default=None)
@click.option("--variant", type=click.Choice([v.value for v in PromptVariant]), default=None)
@click.option("--endpoint", default=None)
@click.option("--model", default=None)
@click.option("--in-flight-limit", "in_flight_limit", type=int, default=None)
@click.option("--json-out", "json_out", type=click.Path(), default=None)
@click.pass_context
def run_benchmark_cmd(ctx: click.Context, k: int | None, variant: str | None,
                      endpoint: str | None, model: str | None,
                      in_flight_limit: int | None, json_out: str | None) -> None:
    """Coarse vs reranked reports with per-metric deltas."""
    config = _config(ctx, k=k, variant=variant, endpoint=endpoint, model=model,
                     in_flight_limit=in_flight_limit)
    engine = Pipeline.from_config(config)
    bench = engine.benchmark()
    delta = bench.deltas()
    click.echo(f"coarse    {_report_rows(bench.coarse)}")
    click.echo(f"reranked  {_report_rows(bench.reranked)}")
    delta_cells = [f"R@{k2} {delta['r_at'][k2]:+.2f}" for k2 in sorted(delta["r_at"])]
    delta_cells.append(f"mAP {delta['map']:+.2f}")
    click.echo(f"delta     {'  '.join(delta_cells)}")
    if json_out:
        payload = json.dumps(bench.to_dict(), sort_keys=True, indent=2)
        with open(json_out, "w", encoding="utf-8") as fh:
            fh.write(payload + "\n")
        click.echo(f"wrote {json_out}")


@main.command("describe")
@click.option("--image-id", required=True)
@click.option("--bbox", required=True, help="x,y,w,h in pixels.")
@click.pass_context
def describe_cmd(ctx: click.Context, image_id: str, bbox: str) -> None:
    """Emit the description-generation prompt bundle for one boxed person."""
    config = _config(ctx)
    engine = Pipeline.from_config(config)
    try:
        parts = tuple(float(v) if "." in v else int(v) for v in bbox.split(","))
        if len(parts) != 4:
            raise ValueError
    except ValueError:
        raise click.ClickException("--bbox must be x,y,w,h") from None
    image = engine.gallery.image(image_id)
    bundle = build_description_prompt(image, parts)
    overlay = bundle.attachments[0].overlay
    click.echo(bundle.prompt_text())
    click.echo(
        json.dumps(
            {
                "uri": bundle.attachments[0].uri,
                "overlay": {
                    "shape": "rectangle",
                    "color": overlay.color,
                    "bbox": list(overlay.bbox),
                    "stroke_px": overlay.stroke_px,
                },
            },
            sort_keys=True,
        )
    )


@main.command("serve")
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8080)
@click.pass_context
def serve_cmd(ctx: click.Context, host: str, port: int) -> None:
    """Run the query service (POST /v1/query, GET /health)."""
    from .service import serve

    serve(_config(ctx), host=host, port=port)


@main.command("mock-ranker")
@click.option("--mode", type=click.Choice(
    ["identity", "reverse", "garbage", "scripted", "oracle", "noisy-oracle", "error"]),
    default="identity")
@click.option("--script", type=click.Path(exists=True), default=None,
              help="JSON map of query text to response text (scripted mode).")
@click.option("--queries", "queries_path", type=click.Path(exists=True), default=None,
              help="Queries file with ground truth (oracle modes).")
@click.option("--manifest", type=click.Path(exists=True), default=None,
              help="Gallery manifest to resolve image uris (oracle modes).")
@click.option("--detections", type=click.Path(exists=True), default=None)
@click.option("--p", type=float, default=0.8)
@click.option("--seed", type=int, default=0)
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8099)
def mock_ranker_cmd(mode: str, script: str | None, queries_path: str | None,
                    manifest: str | None, detections: str | None,
                    p: float, seed: int, host: str, port: int) -> None:
    """Run the loopback mock ranker implementing the wire contract."""
    targets = None
    if mode in ("oracle", "noisy-oracle"):
        if not (queries_path and manifest and detections):
            raise click.ClickException("oracle modes need --queries, --manifest, --detections")
        gallery = load_manifest(manifest, detections)
        queries, gt = load_queries(queries_path)
        targets = OracleTargets.from_ground_truth(queries, gt, gallery)
    server = MockRankerServer(
        mode, script=script, targets=targets, p=p, seed=seed, host=host, port=port
    )
    click.echo(f"mock ranker ({mode}) listening on {server.url}")
    with server:
        try:
            import time

            while True:
                time.sleep(3600)
        except KeyboardInterrupt:
            pass


if __name__ == "__main__":
    main()
