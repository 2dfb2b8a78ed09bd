"""Query/crop scoring and top-k retention.

Scores are dissimilarities in [0, 1]: 0 means the crop embedding points the
same way as the query, 1 means the opposite way.  Selecting "the most relevant"
crops therefore means selecting the *smallest* scores.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput, ProviderError
from .grid import CropGrid, crop_at


def as_embedding(values) -> np.ndarray:
    """Validate an embedding: 1-D, finite, at least one nonzero component."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size < 1:
        raise InvalidInput(f"embedding must be a non-empty vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise InvalidInput("embedding contains non-finite values")
    if not np.any(v):
        raise InvalidInput("zero-norm embedding")
    return v


def similarity(q, v) -> float:
    """Cosine dissimilarity ``(1 - cos(q, v)) / 2``; symmetric and scale invariant."""
    q = as_embedding(q)
    v = as_embedding(v)
    if q.shape != v.shape:
        raise InvalidInput(f"dimension mismatch: {q.size} vs {v.size}")
    cos = float(np.dot(q, v) / (np.linalg.norm(q) * np.linalg.norm(v)))
    cos = min(1.0, max(-1.0, cos))
    return (1.0 - cos) * 0.5


def similarity_rows(Q, V) -> np.ndarray:
    """Row-wise :func:`similarity` of two ``(n, d)`` arrays (``Q`` may be one vector)."""
    V = np.asarray(V, dtype=np.float64)
    Q = np.broadcast_to(np.asarray(Q, dtype=np.float64), V.shape)
    norms = np.linalg.norm(Q, axis=1) * np.linalg.norm(V, axis=1)
    if not np.all(np.isfinite(norms)) or np.any(norms == 0.0):
        raise InvalidInput("zero-norm or non-finite embedding")
    cos = np.einsum("ij,ij->i", Q, V) / norms
    return (1.0 - np.clip(cos, -1.0, 1.0)) * 0.5


@dataclass(frozen=True, eq=False)
class ScoreMatrix:
    scores: np.ndarray

    def __post_init__(self):
        s = np.array(self.scores, dtype=np.float64)
        if s.ndim != 2 or s.size == 0:
            raise InvalidInput(f"score matrix must be 2-D and non-empty, got shape {s.shape}")
        if np.any(~np.isfinite(s)) or s.min() < 0.0 or s.max() > 1.0:
            raise InvalidInput("scores must lie in [0, 1]")
        s.flags.writeable = False
        object.__setattr__(self, "scores", s)

    @property
    def rows(self) -> int:
        return self.scores.shape[0]

    @property
    def cols(self) -> int:
        return self.scores.shape[1]

    def ranking(self) -> np.ndarray:
        """Flat cell indices sorted by ascending score, ties in row-major order."""
        return np.argsort(self.scores.ravel(), kind="stable")

    def to_list(self) -> list[list[float]]:
        return self.scores.tolist()


@dataclass(frozen=True, eq=False)
class RetentionMask:
    bits: np.ndarray

    def __post_init__(self):
        b = np.array(self.bits, dtype=bool)
        if b.ndim != 2 or b.size == 0:
            raise InvalidInput(f"mask must be 2-D and non-empty, got shape {b.shape}")
        b.flags.writeable = False
        object.__setattr__(self, "bits", b)

    @property
    def rows(self) -> int:
        return self.bits.shape[0]

    @property
    def cols(self) -> int:
        return self.bits.shape[1]

    @property
    def count(self) -> int:
        return int(self.bits.sum())

    @classmethod
    def from_cells(cls, rows: int, cols: int, flat_indices) -> "RetentionMask":
        bits = np.zeros(rows * cols, dtype=bool)
        bits[np.asarray(list(flat_indices), dtype=np.int64)] = True
        return cls(bits.reshape(rows, cols))

    def flat_indices(self) -> list[int]:
        return np.flatnonzero(self.bits.ravel()).tolist()

    def to_list(self) -> list[list[int]]:
        return self.bits.astype(int).tolist()


class EmbeddingCache:
    """Thread-safe crop embedding cache keyed by (image digest, flat cell index)."""

    def __init__(self):
        self._lock = threading.Lock()
        self._data: dict[tuple[str, int, int], np.ndarray] = {}

    def get(self, key):
        with self._lock:
            return self._data.get(key)

    def put(self, key, value: np.ndarray) -> None:
        with self._lock:
            self._data.setdefault(key, value)

    def __len__(self):
        with self._lock:
            return len(self._data)


def embed_crops(
    grid: CropGrid,
    provider,
    *,
    cache: EmbeddingCache | None = None,
    max_in_flight: int = 4,
) -> list[np.ndarray]:
    """Embed every crop of ``grid`` (row-major order), reusing ``cache`` entries."""

    def one(index: int) -> np.ndarray:
        row, col = grid.unflat(index)
        key = (grid.source.digest, grid.cell_size, index)
        if cache is not None:
            hit = cache.get(key)
            if hit is not None:
                return hit
        try:
            emb = as_embedding(provider.embed_image(crop_at(grid, row, col)))
        except ProviderError as exc:
            if exc.cell is None:
                exc.cell = (row, col)
            raise
        except InvalidInput as exc:
            raise ProviderError(f"bad embedding for cell ({row}, {col}): {exc}", cell=(row, col)) from exc
        if cache is not None:
            cache.put(key, emb)
        return emb

    indices = range(grid.n_cells)
    if max_in_flight <= 1 or grid.n_cells == 1:
        return [one(i) for i in indices]
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        # map() re-raises the first failure in cell order
        return list(pool.map(one, indices))


def score_crops(
    query_text: str,
    grid: CropGrid,
    provider,
    *,
    query_embedding=None,
    cache: EmbeddingCache | None = None,
    max_in_flight: int = 4,
) -> ScoreMatrix:
    if query_embedding is None:
        query_embedding = provider.embed_query(query_text)
    q = as_embedding(query_embedding)
    embeddings = embed_crops(grid, provider, cache=cache, max_in_flight=max_in_flight)
    for index, emb in enumerate(embeddings):
        if emb.shape != q.shape:
            raise ProviderError(
                f"crop embedding dim {emb.size} != query dim {q.size}",
                cell=grid.unflat(index),
            )
    scores = similarity_rows(q, np.stack(embeddings))
    return ScoreMatrix(scores.reshape(grid.rows, grid.cols))


def top_k(scores: ScoreMatrix, k: int) -> RetentionMask:
    n = scores.rows * scores.cols
    if not 1 <= k <= n:
        raise InvalidInput(f"k must be in [1, {n}], got {k}")
    return RetentionMask.from_cells(scores.rows, scores.cols, scores.ranking()[:k])
