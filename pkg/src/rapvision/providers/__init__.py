"""Embedding and confidence backends.

Any object with ``embed_query(text)`` and ``embed_image(crop)`` can serve as a
retriever; any object with ``yes_probability(canvas, query)`` and
``answer(canvas, query)`` can serve as the answering model.  Two backends ship
here: a remote HTTP client and a deterministic synthetic oracle.
"""

from typing import Protocol

import numpy as np

from ..grid import Crop
from ..layout import Canvas
from .http import HttpProvider, ProviderConfig
from .oracle import UNANSWERABLE, OracleProvider, PixelOracle
from .synthetic import CROSS, SINGLE, SyntheticInstance, generate_suite, load_instance, load_suite, save_suite


class EmbeddingProvider(Protocol):
    def embed_query(self, text: str) -> np.ndarray: ...

    def embed_image(self, crop: Crop) -> np.ndarray: ...


class ConfidenceProvider(Protocol):
    def yes_probability(self, canvas: Canvas, query: str) -> float: ...

    def answer(self, canvas: Canvas, query: str) -> str: ...


__all__ = [
    "CROSS",
    "SINGLE",
    "UNANSWERABLE",
    "ConfidenceProvider",
    "EmbeddingProvider",
    "HttpProvider",
    "OracleProvider",
    "PixelOracle",
    "ProviderConfig",
    "SyntheticInstance",
    "generate_suite",
    "load_instance",
    "load_suite",
    "save_suite",
]
