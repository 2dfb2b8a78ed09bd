"""Retrieval-augmented perception for very large images."""

from .errors import InvalidConfig, InvalidInput, ProtocolError, ProviderError, RapError
from .grid import Crop, CropGrid, SourceImage, crop_at, load_image, partition
from .layout import Canvas, CompressedMask, compress_mask, spatial_layout, strip_layout_by_score
from .retrieval import RetentionMask, ScoreMatrix, score_crops, similarity, top_k
from .search import SearchOutcome, SearchParams, re_search

__version__ = "0.1.0"

__all__ = [
    "Canvas",
    "CompressedMask",
    "Crop",
    "CropGrid",
    "InvalidConfig",
    "InvalidInput",
    "ProtocolError",
    "ProviderError",
    "RapError",
    "RetentionMask",
    "ScoreMatrix",
    "SearchOutcome",
    "SearchParams",
    "SourceImage",
    "compress_mask",
    "crop_at",
    "load_image",
    "partition",
    "re_search",
    "score_crops",
    "similarity",
    "spatial_layout",
    "strip_layout_by_score",
    "top_k",
]
