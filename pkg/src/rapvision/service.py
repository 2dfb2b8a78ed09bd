"""HTTP service around the perception engine.

Two groups of routes:

* ``/v1/tile``, ``/v1/score``, ``/v1/search``: run the engine on an uploaded
  image (base64 PNG/JPEG) with whichever backends the app was built with.
* ``/embed``, ``/confidence``, ``/answer``: the model-server protocol, served
  by a synthetic oracle when the app is started for an instance.  Pointing
  :class:`~rapvision.providers.HttpProvider` at such an app exercises the full
  remote path without a real model.
"""

from __future__ import annotations

import base64
import binascii

from fastapi import FastAPI, HTTPException
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .errors import InvalidConfig, InvalidInput, ProviderError
from .grid import DEFAULT_CELL_SIZE, SourceImage, decode_image, partition
from .pipeline import run_rap
from .providers import PixelOracle, SyntheticInstance, wire
from .retrieval import EmbeddingCache, score_crops
from .search import SearchParams


class SearchSettings(BaseModel):
    ratios: list[float] = [0.25, 0.5, 0.75]
    bias: float = 0.2
    threshold: float = 0.6
    max_depth: int = 8
    max_expansions: int = 64


class TileRequest(BaseModel):
    image: str = Field(..., description="base64 PNG/JPEG/raw image")
    cell_size: int = DEFAULT_CELL_SIZE


class TileResponse(BaseModel):
    width: int
    height: int
    rows: int
    cols: int
    cell_size: int
    rects: list[list[list[int]]]


class ScoreRequest(TileRequest):
    question: str


class ScoreResponse(BaseModel):
    rows: int
    cols: int
    scores: list[list[float]]


class SearchRequest(ScoreRequest):
    image: str | None = Field(None, description="omit to use the served instance's image")
    search: SearchSettings = SearchSettings()
    include_trace: bool = False


class SearchResponse(BaseModel):
    answer: str
    selected_k: int
    confidence: float
    termination: str
    expansions: int
    retained: list[list[int]]
    trace: list[dict] | None = None


def _image(payload: str) -> SourceImage:
    try:
        return decode_image(base64.b64decode(payload, validate=True))
    except (binascii.Error, ValueError) as exc:
        raise HTTPException(422, f"bad image payload: {exc}") from exc


def create_app(
    *,
    retriever=None,
    mllm=None,
    instance: SyntheticInstance | None = None,
) -> FastAPI:
    """Build the app.  With ``instance``, an oracle backs both the protocol
    routes and (unless overridden) the engine routes."""
    oracle = PixelOracle(instance) if instance is not None else None
    retriever = retriever or oracle
    mllm = mllm or oracle
    cache = EmbeddingCache()
    app = FastAPI(title="rapvision", version="0.1.0")

    def need(backend, what):
        if backend is None:
            raise HTTPException(503, f"no {what} backend configured")
        return backend

    @app.exception_handler(InvalidInput)
    async def _invalid(request, exc):
        return JSONResponse(status_code=422, content={"detail": str(exc)})

    @app.get("/health")
    def health():
        return {
            "status": "ok",
            "instance": None if instance is None else instance.id,
            "retriever": retriever is not None,
            "mllm": mllm is not None,
        }

    @app.post("/v1/tile", response_model=TileResponse)
    def tile(req: TileRequest):
        try:
            grid = partition(_image(req.image), req.cell_size)
        except InvalidConfig as exc:
            raise HTTPException(422, str(exc)) from exc
        return TileResponse(
            width=grid.source.width,
            height=grid.source.height,
            rows=grid.rows,
            cols=grid.cols,
            cell_size=grid.cell_size,
            rects=[[list(r) for r in row] for row in grid.crop_rects],
        )

    @app.post("/v1/score", response_model=ScoreResponse)
    def score(req: ScoreRequest):
        backend = need(retriever, "retriever")
        try:
            grid = partition(_image(req.image), req.cell_size)
            scores = score_crops(req.question, grid, backend, cache=cache)
        except InvalidConfig as exc:
            raise HTTPException(422, str(exc)) from exc
        except ProviderError as exc:
            raise HTTPException(502, str(exc)) from exc
        return ScoreResponse(rows=scores.rows, cols=scores.cols, scores=scores.to_list())

    @app.post("/v1/search", response_model=SearchResponse)
    def search(req: SearchRequest):
        r, m = need(retriever, "retriever"), need(mllm, "answering")
        if req.image is None:
            if instance is None:
                raise HTTPException(422, "image is required")
            image, cell_size = oracle.image, instance.cell_size
        else:
            image, cell_size = _image(req.image), req.cell_size
        try:
            params = SearchParams(
                ratios=tuple(req.search.ratios),
                bias=req.search.bias,
                threshold=req.search.threshold,
                max_depth=req.search.max_depth,
                max_expansions=req.search.max_expansions,
            )
            result = run_rap(image, req.question, r, m, cell_size=cell_size, params=params, cache=cache)
        except InvalidConfig as exc:
            raise HTTPException(422, str(exc)) from exc
        except ProviderError as exc:
            raise HTTPException(502, str(exc)) from exc
        out = result.outcome
        return SearchResponse(
            answer=result.answer,
            selected_k=out.selected_k,
            confidence=out.confidence,
            termination=out.termination,
            expansions=out.expansions,
            retained=[list(result.grid.unflat(i)) for i in out.retained_cells],
            trace=out.visit_trace if req.include_trace else None,
        )

    # -- model-server protocol (oracle-backed) --------------------------------

    def need_oracle():
        if oracle is None:
            raise HTTPException(503, "model-server routes need an instance (start with --instance)")
        return oracle

    def _png(payload: str) -> SourceImage:
        try:
            return decode_image(wire.decode_png(payload))
        except (binascii.Error, ValueError) as exc:
            raise HTTPException(422, f"bad image payload: {exc}") from exc

    @app.post("/embed", response_model=wire.EmbedResponse)
    def embed(req: wire.EmbedRequest):
        o = need_oracle()
        if req.kind == "text":
            vec = o.embed_query(req.payload)
        else:
            vec = o.embed_image(_png(req.payload))
        return wire.EmbedResponse(embedding=[float(v) for v in vec])

    @app.post("/confidence", response_model=wire.ConfidenceResponse)
    def confidence(req: wire.ConfidenceRequest):
        return wire.ConfidenceResponse(yes_probability=need_oracle().yes_probability(_png(req.image), req.prompt))

    @app.post("/answer", response_model=wire.AnswerResponse)
    def answer(req: wire.AnswerRequest):
        return wire.AnswerResponse(text=need_oracle().answer(_png(req.image), req.question))

    return app
