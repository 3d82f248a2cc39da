"""The `sap-adapters` command: one subcommand per job kind."""

from __future__ import annotations

import sys
import time

import click

from .fileio import AdapterError
from .jobs import build_bridge, load_job, run_job


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="Job config file (YAML or JSON); flags override it.")
@click.pass_context
def main(ctx: click.Context, config_path: str | None) -> None:
    """Export embeddings and detections, generate descriptions, serve the bridge."""
    ctx.obj = {"config_path": config_path}


def _run(ctx: click.Context, kind: str, **overrides) -> dict:
    try:
        job = load_job(kind, ctx.obj.get("config_path"), overrides)
        return run_job(job)
    except AdapterError as exc:
        raise click.ClickException(str(exc)) from None


@main.command("embed-scenes")
@click.option("--manifest", type=click.Path(), default=None)
@click.option("--out", type=click.Path(), default=None)
@click.option("--model", default=None, help="hash:<dim> or clip:<model-id>; default hash:64.")
@click.option("--device", default=None)
@click.pass_context
def embed_scenes(ctx, manifest, out, model, device) -> None:
    summary = _run(ctx, "embed_scenes", manifest=manifest, out=out, model=model, device=device)
    click.echo(f"wrote {summary['written']} scene embeddings")


@main.command("embed-crops")
@click.option("--manifest", type=click.Path(), default=None)
@click.option("--detections", type=click.Path(), default=None)
@click.option("--out", type=click.Path(), default=None)
@click.option("--model", default=None)
@click.option("--device", default=None)
@click.pass_context
def embed_crops(ctx, manifest, detections, out, model, device) -> None:
    summary = _run(ctx, "embed_crops", manifest=manifest, detections=detections, out=out,
                   model=model, device=device)
    click.echo(f"wrote {summary['written']} crop embeddings")


@main.command("embed-queries")
@click.option("--queries", type=click.Path(), default=None)
@click.option("--out", type=click.Path(), default=None)
@click.option("--model", default=None)
@click.option("--key-by", "key_by", type=click.Choice(["query_id", "text"]), default=None)
@click.option("--device", default=None)
@click.pass_context
def embed_queries(ctx, queries, out, model, key_by, device) -> None:
    summary = _run(ctx, "embed_queries", queries=queries, out=out, model=model,
                   key_by=key_by, device=device)
    click.echo(f"wrote {summary['written']} query embeddings")


@main.command("detect")
@click.option("--manifest", type=click.Path(), default=None)
@click.option("--raw", type=click.Path(), default=None,
              help="Raw track records from the upstream detector+pose stack.")
@click.option("--backend", type=click.Choice(["raw", "marker"]), default=None)
@click.option("--out", type=click.Path(), default=None)
@click.pass_context
def detect(ctx, manifest, raw, backend, out) -> None:
    summary = _run(ctx, "detect", manifest=manifest, raw=raw, backend=backend, out=out)
    click.echo(f"wrote {summary['written']} detections (skipped {summary['skipped']})")


@main.command("describe")
@click.option("--manifest", type=click.Path(), default=None)
@click.option("--detections", type=click.Path(), default=None)
@click.option("--endpoint", default=None, help="Wire-contract endpoint (bridge or mock).")
@click.option("--model", default=None)
@click.option("--out", type=click.Path(), default=None)
@click.pass_context
def describe(ctx, manifest, detections, endpoint, model, out) -> None:
    summary = _run(ctx, "describe", manifest=manifest, detections=detections,
                   endpoint=endpoint, model=model, out=out)
    click.echo(f"wrote {summary['written']} descriptions, {summary['failed']} failures")
    if summary["failed"]:
        sys.exit(2 if summary["written"] else 1)


@main.command("serve-mock")
@click.option("--mock", default=None, help="scripted:<path> replay table.")
@click.option("--upstream", default=None, help="Chat-completions endpoint to translate to.")
@click.option("--model", default=None)
@click.option("--host", default=None)
@click.option("--port", type=int, default=None)
@click.pass_context
def serve_mock(ctx, mock, upstream, model, host, port) -> None:
    """Run the MLLM bridge (scripted replay and/or upstream translation)."""
    try:
        job = load_job("serve_mock", ctx.obj.get("config_path"),
                       {"mock": mock, "upstream": upstream, "model": model,
                        "host": host, "port": port})
        bridge = build_bridge(job)
    except AdapterError as exc:
        raise click.ClickException(str(exc)) from None
    click.echo(f"bridge listening on {bridge.url}")
    with bridge:
        try:
            while True:
                time.sleep(3600)
        except KeyboardInterrupt:
            pass


if __name__ == "__main__":
    main()
