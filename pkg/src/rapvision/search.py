"""Confidence-guided best-first search over retention states.

Every node keeps a subset of the crops of its parent: the ``round(n * p)``
best-scored ones for each retention ratio ``p``.  A node is ranked by

    f = (1 - w) * g + w * h,    w = (1 - b) * (1 - 1/d)**2 + b

where ``g`` is the mean crop score it keeps, ``h`` is one minus the model's
probability that its canvas is enough to answer the question, and ``d`` is
its depth (root = 1).  The search stops as soon as a popped node's confidence
``1 - h`` exceeds the threshold.

``h`` costs one model call, so children are pushed with their parent's ``h``
and only get their own when popped.  If the corrected ``f`` is worse than the
best waiting node, the node goes back in the queue instead of being acted on.
"""

from __future__ import annotations

import heapq
import itertools
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .errors import InvalidConfig, InvalidInput, ProviderError
from .grid import CropGrid
from .layout import Canvas, spatial_layout
from .retrieval import RetentionMask, ScoreMatrix

THRESHOLD_MET = "threshold-met"
FRONTIER_EXHAUSTED = "frontier-exhausted"
BUDGET_EXHAUSTED = "budget-exhausted"

CONFIDENCE_PROMPT = (
    "Question: {q}. Could you answer the question based on the available visual "
    "information? Answer Yes or No."
)


@dataclass(frozen=True)
class SearchParams:
    ratios: tuple[float, ...] = (0.25, 0.5, 0.75)
    bias: float = 0.2
    threshold: float = 0.6
    max_depth: int = 8
    max_expansions: int = 64

    def __post_init__(self):
        ratios = tuple(float(p) for p in self.ratios)
        object.__setattr__(self, "ratios", ratios)
        if not ratios:
            raise InvalidConfig("at least one retention ratio is required")
        if any(not 0.0 < p < 1.0 for p in ratios):
            raise InvalidConfig(f"retention ratios must lie in (0, 1): {ratios}")
        if any(a >= b for a, b in zip(ratios, ratios[1:])):
            raise InvalidConfig(f"retention ratios must be strictly increasing: {ratios}")
        if not 0.0 <= self.bias < 1.0:
            raise InvalidConfig(f"bias must lie in [0, 1), got {self.bias}")
        if not 0.0 < self.threshold < 1.0:
            raise InvalidConfig(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.max_depth < 1 or self.max_expansions < 0:
            raise InvalidConfig("max_depth must be >= 1 and max_expansions >= 0")


def depth_weight(d: int, b: float = 0.2) -> float:
    if d < 1:
        raise InvalidInput(f"depth must be >= 1, got {d}")
    return (1.0 - b) * (1.0 - 1.0 / d) ** 2 + b


def f_cost(g: float, h: float, d: int, b: float = 0.2) -> float:
    w = depth_weight(d, b)
    return (1.0 - w) * g + w * h


def retained_count(n: int, ratio: float) -> int:
    """``max(1, round_half_up(n * ratio))``, computed exactly from the ratio's decimal form."""
    return max(1, math.floor(n * Fraction(repr(ratio)) + Fraction(1, 2)))


@dataclass(eq=False)
class SearchNode:
    id: int
    retained: tuple[int, ...]  # flat cell indices, best score first
    depth: int
    g: float
    f: float
    parent: "SearchNode | None" = None
    ratio_used: float | None = None
    h: float | None = None
    canvas: Canvas | None = field(default=None, repr=False)

    @property
    def n_retained(self) -> int:
        return len(self.retained)

    @property
    def evaluated(self) -> bool:
        return self.h is not None

    @property
    def confidence(self) -> float | None:
        return None if self.h is None else 1.0 - self.h

    @property
    def key(self) -> tuple[int, ...]:
        return tuple(sorted(self.retained))

    def mask(self, rows: int, cols: int) -> RetentionMask:
        return RetentionMask.from_cells(rows, cols, self.retained)


def g_cost(node: SearchNode, scores: ScoreMatrix) -> float:
    if not node.retained:
        raise InvalidInput("node retains no crop")
    flat = scores.scores.ravel()
    return float(np.mean(flat[list(node.retained)]))


def h_cost(node: SearchNode, grid: CropGrid, provider, query: str) -> float:
    """Memoized ``1 - P(yes)`` for the node's spatial-layout canvas."""
    if node.h is not None:
        return node.h
    if node.canvas is None:
        node.canvas = spatial_layout(grid, node.mask(grid.rows, grid.cols))
    p = float(provider.yes_probability(node.canvas, query))
    if not 0.0 <= p <= 1.0 or math.isnan(p):
        raise ProviderError(f"yes-probability {p} outside [0, 1]")
    node.h = 1.0 - p
    return node.h


class Frontier:
    """Min-queue on (f, depth, insertion order)."""

    def __init__(self):
        self._heap: list = []
        self._seq = itertools.count()

    def push(self, node) -> None:
        heapq.heappush(self._heap, (node.f, node.depth, next(self._seq), node))

    def pop(self):
        return heapq.heappop(self._heap)[-1]

    def min_f(self) -> float:
        return self._heap[0][0]

    def __len__(self):
        return len(self._heap)


@dataclass
class BestFirstResult:
    goal: object
    status: str
    expansions: int
    pops: list


def best_first(
    root,
    *,
    expand: Callable[[object], Iterable],
    is_goal: Callable[[object], bool],
    evaluate: Callable[[object], None] | None = None,
    needs_evaluation: Callable[[object], bool] = lambda node: False,
    max_expansions: int | None = None,
    max_depth: int | None = None,
    on_event: Callable[[str, object], None] | None = None,
) -> BestFirstResult:
    """Generic best-first loop with lazily corrected priorities.

    Nodes need ``f`` and ``depth`` attributes.  When ``needs_evaluation`` is true
    for a popped node, ``evaluate`` must refresh its ``f``; the node is then
    re-queued if some waiting node is now strictly better.
    """
    emit = on_event or (lambda event, node: None)
    frontier = Frontier()
    frontier.push(root)
    pops = []
    expansions = 0
    while frontier:
        node = frontier.pop()
        pops.append(node)
        if needs_evaluation(node):
            evaluate(node)
            if frontier and node.f > frontier.min_f():
                emit("repush", node)
                frontier.push(node)
                continue
        if is_goal(node):
            emit("goal", node)
            return BestFirstResult(node, THRESHOLD_MET, expansions, pops)
        if max_expansions is not None and expansions >= max_expansions:
            emit("budget", node)
            return BestFirstResult(None, BUDGET_EXHAUSTED, expansions, pops)
        if max_depth is not None and node.depth >= max_depth:
            emit("leaf", node)
            continue
        emit("expand", node)
        for child in expand(node):
            frontier.push(child)
        expansions += 1
    return BestFirstResult(None, FRONTIER_EXHAUSTED, expansions, pops)


class RETree:
    """Child generation for retention states, with global de-duplication."""

    def __init__(self, scores: ScoreMatrix, params: SearchParams, *, first_id: int = 0):
        self.scores = scores
        self.params = params
        self._ids = itertools.count(first_id)
        self._seen: set[tuple[int, ...]] = set()
        self.nodes: list[SearchNode] = []

    def adopt(self, node: SearchNode) -> None:
        """Mark ``node`` as already generated, so its state is never produced again."""
        self._register(node)

    def root(self) -> SearchNode:
        retained = tuple(int(i) for i in self.scores.ranking())
        node = SearchNode(next(self._ids), retained, 1, 0.0, 0.0)
        node.g = g_cost(node, self.scores)
        node.f = node.g
        self._register(node)
        return node

    def _register(self, node: SearchNode) -> None:
        self._seen.add(node.key)
        self.nodes.append(node)

    def expand(self, node: SearchNode) -> list[SearchNode]:
        n = node.n_retained
        parent_h = node.h if node.h is not None else 1.0
        children = []
        for p in self.params.ratios:
            k = retained_count(n, p)
            if k >= n:
                continue
            retained = node.retained[:k]
            key = tuple(sorted(retained))
            if key in self._seen:
                continue
            child = SearchNode(
                next(self._ids), retained, node.depth + 1, 0.0, 0.0, parent=node, ratio_used=p
            )
            child.g = g_cost(child, self.scores)
            child.f = f_cost(child.g, parent_h, child.depth, self.params.bias)
            self._register(child)
            children.append(child)
        return children


def expand(node: SearchNode, scores: ScoreMatrix, params: SearchParams) -> list[SearchNode]:
    """Children of ``node`` on their own (no de-duplication against other branches)."""
    tree = RETree(scores, params, first_id=node.id + 1)
    tree.adopt(node)
    return tree.expand(node)


@dataclass
class SearchOutcome:
    final_canvas: Canvas
    final_node: SearchNode
    selected_k: int
    confidence: float
    visit_trace: list[dict]
    expansions: int
    termination: str
    evaluations: int

    @property
    def retained_cells(self) -> list[int]:
        return sorted(self.final_node.retained)


def _trace_row(event: str, node: SearchNode) -> dict:
    return {
        "event": event,
        "node": node.id,
        "parent": None if node.parent is None else node.parent.id,
        "k": node.n_retained,
        "d": node.depth,
        "g": node.g,
        "h": node.h,
        "f": node.f,
        "retained": sorted(node.retained),
    }


def _best_confidence(nodes: Iterable[SearchNode]) -> SearchNode:
    best = None
    for node in nodes:
        if node.h is None:
            continue
        if best is None or node.h < best.h:
            best = node
    return best


def _validate(grid: CropGrid, scores: ScoreMatrix) -> None:
    if (scores.rows, scores.cols) != (grid.rows, grid.cols):
        raise InvalidInput(
            f"score matrix {scores.rows}x{scores.cols} does not match grid {grid.rows}x{grid.cols}"
        )


def re_search(
    grid: CropGrid,
    scores: ScoreMatrix,
    provider,
    query: str,
    params: SearchParams | None = None,
    *,
    trace_path: str | Path | None = None,
) -> SearchOutcome:
    params = params or SearchParams()
    _validate(grid, scores)
    tree = RETree(scores, params)
    trace: list[dict] = []
    evaluated: list[SearchNode] = []

    def evaluate(node: SearchNode) -> None:
        try:
            h_cost(node, grid, provider, query)
        except ProviderError as exc:
            exc.trace = trace
            raise
        evaluated.append(node)
        node.f = f_cost(node.g, node.h, node.depth, params.bias)
        trace.append(_trace_row("evaluate", node))

    def on_event(event: str, node: SearchNode) -> None:
        trace.append(_trace_row(event, node))

    result = best_first(
        tree.root(),
        expand=tree.expand,
        is_goal=lambda node: 1.0 - node.h > params.threshold,
        evaluate=evaluate,
        needs_evaluation=lambda node: not node.evaluated,
        max_expansions=params.max_expansions,
        max_depth=params.max_depth,
        on_event=on_event,
    )
    final = result.goal if result.goal is not None else _best_confidence(evaluated)
    outcome = SearchOutcome(
        final_canvas=final.canvas,
        final_node=final,
        selected_k=final.n_retained,
        confidence=final.confidence,
        visit_trace=trace,
        expansions=result.expansions,
        termination=result.status,
        evaluations=len(evaluated),
    )
    if trace_path is not None:
        write_trace(trace, trace_path)
    return outcome


def exhaustive_search(
    grid: CropGrid,
    scores: ScoreMatrix,
    provider,
    query: str,
    params: SearchParams | None = None,
) -> SearchOutcome:
    """Reference: evaluate every reachable state, return the lowest-f one above threshold.

    Falls back to the most confident state when none crosses the threshold.
    """
    params = params or SearchParams()
    _validate(grid, scores)
    tree = RETree(scores, params)
    queue = [tree.root()]
    trace: list[dict] = []
    expansions = 0
    for node in queue:  # grows while iterating: breadth-first
        h_cost(node, grid, provider, query)
        node.f = f_cost(node.g, node.h, node.depth, params.bias)
        trace.append(_trace_row("evaluate", node))
        if node.depth < params.max_depth:
            queue.extend(tree.expand(node))
            expansions += 1
    answerable = [n for n in queue if 1.0 - n.h > params.threshold]
    if answerable:
        final = min(answerable, key=lambda n: (n.f, n.depth, n.id))
        status = THRESHOLD_MET
    else:
        final = _best_confidence(queue)
        status = FRONTIER_EXHAUSTED
    return SearchOutcome(
        final_canvas=final.canvas,
        final_node=final,
        selected_k=final.n_retained,
        confidence=final.confidence,
        visit_trace=trace,
        expansions=expansions,
        termination=status,
        evaluations=len(queue),
    )


def trace_lines(trace: list[dict]) -> str:
    return "".join(json.dumps(row, sort_keys=True) + "\n" for row in trace)


def write_trace(trace: list[dict], path: str | Path) -> None:
    Path(path).write_text(trace_lines(trace))
