"""Record and replay HTTP sessions with a model server.

A session file is JSON: ``{"version": 1, "exchanges": [...]}`` where each
exchange stores the request path and the exact request/response body text.
Replay matches requests on their content (decoded pixels for images, not PNG
bytes), so it does not depend on request order or on the PNG encoder.
"""

from __future__ import annotations

import hashlib
import io
import json
import threading
from pathlib import Path

import httpx
import numpy as np
from PIL import Image

from . import wire


def _pixel_digest(b64: str) -> str:
    with Image.open(io.BytesIO(wire.decode_png(b64))) as im:
        arr = np.asarray(im.convert("RGB"))
    h = hashlib.sha256(repr(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def request_key(path: str, body: str) -> tuple:
    """Content key of a request body, insensitive to PNG encoding details."""
    request_model, _ = wire.ENDPOINTS[path]
    req = request_model.model_validate_json(body)
    if path == "/embed":
        payload = req.payload if req.kind == "text" else _pixel_digest(req.payload)
        return (path, req.kind, payload)
    if path == "/confidence":
        return (path, _pixel_digest(req.image), req.prompt)
    return (path, _pixel_digest(req.image), req.question)


class RecordingTransport(httpx.BaseTransport):
    def __init__(self, inner: httpx.BaseTransport):
        self.inner = inner
        self.exchanges: list[dict] = []
        self._lock = threading.Lock()

    def handle_request(self, request: httpx.Request) -> httpx.Response:
        body = request.read().decode("utf-8")
        response = self.inner.handle_request(request)
        content = response.read()
        with self._lock:
            self.exchanges.append(
                {
                    "path": request.url.path,
                    "status": response.status_code,
                    "request": body,
                    "response": content.decode("utf-8"),
                }
            )
        return httpx.Response(response.status_code, headers=response.headers, content=content)

    def save(self, path: str | Path) -> None:
        seen = set()
        unique = []
        for ex in self.exchanges:
            key = request_key(ex["path"], ex["request"])
            if key not in seen:
                seen.add(key)
                unique.append(ex)
        Path(path).write_text(json.dumps({"version": 1, "exchanges": unique}, indent=1) + "\n")


class ReplayTransport(httpx.BaseTransport):
    """Serve recorded responses; unknown requests get HTTP 404."""

    def __init__(self, exchanges: list[dict]):
        self.exchanges = exchanges
        self._table = {request_key(ex["path"], ex["request"]): ex for ex in exchanges}
        self.misses: list[str] = []

    @classmethod
    def from_file(cls, path: str | Path) -> "ReplayTransport":
        doc = json.loads(Path(path).read_text())
        return cls(doc["exchanges"])

    def handle_request(self, request: httpx.Request) -> httpx.Response:
        body = request.read().decode("utf-8")
        path = request.url.path
        ex = None
        if path in wire.ENDPOINTS:
            ex = self._table.get(request_key(path, body))
        if ex is None:
            self.misses.append(path)
            return httpx.Response(404, json={"detail": "no recorded exchange"})
        return httpx.Response(
            ex["status"], content=ex["response"].encode("utf-8"),
            headers={"Content-Type": "application/json"},
        )
