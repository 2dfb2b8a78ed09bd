"""End-to-end answering: tile, score, search, compose, answer."""

from __future__ import annotations

from dataclasses import dataclass

from .grid import DEFAULT_CELL_SIZE, CropGrid, SourceImage, partition
from .retrieval import EmbeddingCache, ScoreMatrix, score_crops
from .search import SearchOutcome, SearchParams, re_search


@dataclass
class RapResult:
    answer: str
    outcome: SearchOutcome
    scores: ScoreMatrix
    grid: CropGrid

    @property
    def selected_k(self) -> int:
        return self.outcome.selected_k

    @property
    def confidence(self) -> float:
        return self.outcome.confidence


def run_rap(
    image: SourceImage,
    question: str,
    retriever,
    mllm,
    *,
    cell_size: int = DEFAULT_CELL_SIZE,
    params: SearchParams | None = None,
    cache: EmbeddingCache | None = None,
    max_in_flight: int = 4,
    trace_path=None,
) -> RapResult:
    grid = partition(image, cell_size)
    scores = score_crops(question, grid, retriever, cache=cache, max_in_flight=max_in_flight)
    outcome = re_search(grid, scores, mllm, question, params, trace_path=trace_path)
    answer = mllm.answer(outcome.final_canvas, question)
    return RapResult(answer, outcome, scores, grid)
