"""JSON bodies exchanged with a remote model server.

    POST /embed       {"kind": "text"|"image", "payload": str}  -> {"embedding": [float, ...]}
    POST /confidence  {"image": b64 PNG, "prompt": str}         -> {"yes_probability": float}
    POST /answer      {"image": b64 PNG, "question": str}       -> {"text": str}

Field order in each model is the serialised order, so ``model_dump_json`` of a
parsed body reproduces the body byte for byte.
"""

from __future__ import annotations

import base64
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field


class _Body(BaseModel):
    model_config = ConfigDict(extra="forbid")


class EmbedRequest(_Body):
    kind: Literal["text", "image"]
    payload: str = Field(..., min_length=1)


class EmbedResponse(_Body):
    embedding: list[float] = Field(..., min_length=1)


class ConfidenceRequest(_Body):
    image: str
    prompt: str


class ConfidenceResponse(_Body):
    yes_probability: float = Field(..., ge=0.0, le=1.0)


class AnswerRequest(_Body):
    image: str
    question: str


class AnswerResponse(_Body):
    text: str


ENDPOINTS = {
    "/embed": (EmbedRequest, EmbedResponse),
    "/confidence": (ConfidenceRequest, ConfidenceResponse),
    "/answer": (AnswerRequest, AnswerResponse),
}


def encode_png(png: bytes) -> str:
    return base64.b64encode(png).decode("ascii")


def decode_png(text: str) -> bytes:
    return base64.b64decode(text.encode("ascii"), validate=True)
