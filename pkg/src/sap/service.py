"""Query service: a thin HTTP layer over an immutable Pipeline.

Text embeddings are precomputed (the engine never runs encoders), so the
service resolves each request's text against the text-embedding store by exact
string key and rejects unknown texts with a 400.
"""

from __future__ import annotations

import threading

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from .pipeline import Pipeline, PipelineConfig
from .ranker import PromptVariant
from .retrieval import TextQuery


class QueryRequest(BaseModel):
    text: str
    appearance_text: str | None = None
    k: int | None = None
    variant: str | None = None


def create_app(engine: Pipeline | None = None) -> FastAPI:
    app = FastAPI(title="sap-retrieval")
    app.state.engine = engine

    @app.exception_handler(RequestValidationError)
    async def invalid_body(request: Request, exc: RequestValidationError) -> JSONResponse:
        return JSONResponse(status_code=400, content={"error": str(exc.errors())})

    @app.get("/health")
    def health() -> JSONResponse:
        engine: Pipeline | None = app.state.engine
        if engine is None:
            return JSONResponse(status_code=503, content={"status": "loading"})
        return JSONResponse(
            content={
                "status": "ok",
                "images": len(engine.gallery.images),
                "crops": len(engine.gallery.crops),
            }
        )

    @app.post("/v1/query")
    def query(body: QueryRequest) -> JSONResponse:
        engine: Pipeline | None = app.state.engine
        if engine is None:
            return JSONResponse(status_code=503, content={"error": "gallery still loading"})
        if not body.text:
            return JSONResponse(status_code=400, content={"error": "text must be non-empty"})
        if body.k is not None and body.k < 1:
            return JSONResponse(status_code=400, content={"error": "k must be >= 1"})
        if body.variant is not None:
            try:
                PromptVariant(body.variant)
            except ValueError:
                return JSONResponse(
                    status_code=400, content={"error": f"unknown variant {body.variant!r}"}
                )
        key = body.appearance_text if body.appearance_text else body.text
        if key not in engine.text_embs:
            return JSONResponse(
                status_code=400,
                content={"error": f"no precomputed embedding for text {key!r}"},
            )
        query = TextQuery(
            query_id=key,
            text=body.text,
            appearance_text=body.appearance_text,
            text_embedding_key=key,
        )
        k = body.k if body.k is not None else engine.k
        variant = PromptVariant(body.variant) if body.variant else None
        result, _ = engine.run_query(query, k=k, variant=variant)
        scores = {c.crop_id: c.score for c in engine.coarse_scores(query)}
        results = []
        for rank, crop_id in enumerate(result.final_order[:k], start=1):
            crop = engine.gallery.crop(crop_id)
            results.append(
                {
                    "rank": rank,
                    "crop_id": crop_id,
                    "image_id": crop.source_image_id,
                    "bbox": list(crop.bbox),
                    "score": scores[crop_id],
                }
            )
        return JSONResponse(
            content={"results": results, "rerank_applied": result.rerank_applied}
        )

    return app


def serve(config: PipelineConfig, host: str = "127.0.0.1", port: int = 8080) -> None:
    """Run the query service; answers 503 until the gallery finishes loading."""
    import uvicorn

    app = create_app(engine=None)

    def load() -> None:
        app.state.engine = Pipeline.from_config(config)

    threading.Thread(target=load, daemon=True).start()
    uvicorn.run(app, host=host, port=port, log_level="warning")
