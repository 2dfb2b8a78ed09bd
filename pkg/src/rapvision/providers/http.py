"""HTTP+JSON client for a remote retriever / MLLM server."""

from __future__ import annotations

import logging
import os
import threading
import time
from dataclasses import dataclass

import httpx
import numpy as np
from pydantic import ValidationError

from ..errors import InvalidConfig, InvalidInput, ProtocolError, ProviderError
from ..grid import Crop, SourceImage
from ..layout import Canvas
from ..search import CONFIDENCE_PROMPT
from . import wire

log = logging.getLogger(__name__)

RETRY_STATUS = {429, 500, 502, 503, 504}
BACKOFF_START = 0.2


@dataclass(frozen=True)
class ProviderConfig:
    base_url: str = "http://127.0.0.1:8000"
    timeout_ms: int = 30_000
    max_retries: int = 3
    auth_token_env: str = "RAPVISION_TOKEN"
    max_in_flight: int = 4

    def __post_init__(self):
        if self.timeout_ms <= 0:
            raise InvalidConfig("timeout_ms must be > 0")
        if not 0 <= self.max_retries <= 5:
            raise InvalidConfig("max_retries must lie in [0, 5]")
        if self.max_in_flight < 1:
            raise InvalidConfig("max_in_flight must be >= 1")


class HttpProvider:
    """Embedding + confidence + answer backend speaking the ``wire`` protocol.

    Safe to share between threads; at most ``max_in_flight`` requests run at once.
    """

    def __init__(
        self,
        config: ProviderConfig | None = None,
        *,
        transport: httpx.BaseTransport | None = None,
        sleep=time.sleep,
    ):
        self.config = config or ProviderConfig()
        headers = {}
        token = os.environ.get(self.config.auth_token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        self._client = httpx.Client(
            base_url=self.config.base_url,
            timeout=self.config.timeout_ms / 1000.0,
            headers=headers,
            transport=transport,
        )
        self._slots = threading.BoundedSemaphore(self.config.max_in_flight)
        self._sleep = sleep

    def close(self) -> None:
        self._client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _post(self, path: str, body: wire.BaseModel):
        _, response_model = wire.ENDPOINTS[path]
        content = body.model_dump_json()
        attempts = self.config.max_retries + 1
        last = None
        for attempt in range(attempts):
            if attempt:
                self._sleep(BACKOFF_START * 2 ** (attempt - 1))
            try:
                with self._slots:
                    resp = self._client.post(
                        path, content=content, headers={"Content-Type": "application/json"}
                    )
            except httpx.HTTPError as exc:
                last = f"{type(exc).__name__}: {exc}"
                log.warning("POST %s failed (attempt %d/%d): %s", path, attempt + 1, attempts, last)
                continue
            if resp.status_code in RETRY_STATUS:
                last = f"HTTP {resp.status_code}"
                log.warning("POST %s returned %d (attempt %d/%d)", path, resp.status_code, attempt + 1, attempts)
                continue
            if resp.status_code != 200:
                raise ProviderError(f"POST {path}: HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return response_model.model_validate_json(resp.content)
            except ValidationError as exc:
                raise ProtocolError(f"POST {path}: malformed response: {exc}") from exc
        raise ProviderError(f"POST {path}: giving up after {attempts} attempt(s): {last}")

    def embed_query(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise InvalidInput("query text is empty")
        resp = self._post("/embed", wire.EmbedRequest(kind="text", payload=text))
        return _embedding(resp)

    def embed_image(self, crop: Crop | SourceImage) -> np.ndarray:
        image = crop if isinstance(crop, SourceImage) else SourceImage(crop.pixels)
        payload = wire.encode_png(image.to_png())
        resp = self._post("/embed", wire.EmbedRequest(kind="image", payload=payload))
        return _embedding(resp)

    def yes_probability(self, canvas: Canvas, query: str) -> float:
        body = wire.ConfidenceRequest(
            image=wire.encode_png(canvas.to_png()), prompt=CONFIDENCE_PROMPT.format(q=query)
        )
        return self._post("/confidence", body).yes_probability

    def answer(self, canvas: Canvas, query: str) -> str:
        body = wire.AnswerRequest(image=wire.encode_png(canvas.to_png()), question=query)
        return self._post("/answer", body).text


def _embedding(resp: wire.EmbedResponse) -> np.ndarray:
    v = np.asarray(resp.embedding, dtype=np.float64)
    if not np.all(np.isfinite(v)) or not np.any(v):
        raise ProtocolError("server returned a zero or non-finite embedding")
    return v
