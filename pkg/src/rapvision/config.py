"""Settings file (YAML) and defaults.

Example::

    cell_size: 448
    search:
      ratios: [0.25, 0.5, 0.75]
      bias: 0.2
      threshold: 0.6
      max_depth: 8
      max_expansions: 64
    provider:
      kind: http
      base_url: http://127.0.0.1:8000
      timeout_ms: 30000
      max_retries: 3
      auth_token_env: RAPVISION_TOKEN
      max_in_flight: 4
    experiment:
      variants: [baseline-full-image, rap-full]
      k_values: [1, 2, 4, 8, 16, all]
      workers: 1
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .errors import InvalidConfig
from .grid import DEFAULT_CELL_SIZE
from .providers.http import ProviderConfig
from .search import SearchParams

_SECTIONS = {"cell_size", "search", "provider", "experiment"}


@dataclass
class Settings:
    cell_size: int = DEFAULT_CELL_SIZE
    search: SearchParams = field(default_factory=SearchParams)
    provider_kind: str = "oracle"
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    experiment: dict = field(default_factory=dict)


def _build(cls, section: dict | None, name: str):
    section = dict(section or {})
    known = {f.name for f in fields(cls)}
    extra = set(section) - known
    if extra:
        raise InvalidConfig(f"unknown key(s) in [{name}]: {sorted(extra)}")
    if "ratios" in section:
        section["ratios"] = tuple(section["ratios"])
    try:
        return cls(**section)
    except TypeError as exc:
        raise InvalidConfig(f"[{name}]: {exc}") from exc


def load_settings(path: str | Path | None) -> Settings:
    if path is None:
        return Settings()
    try:
        doc = yaml.safe_load(Path(path).read_text()) or {}
    except OSError as exc:
        raise InvalidConfig(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise InvalidConfig(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise InvalidConfig(f"{path}: top level must be a mapping")
    unknown = set(doc) - _SECTIONS
    if unknown:
        raise InvalidConfig(f"{path}: unknown section(s) {sorted(unknown)}")
    provider = dict(doc.get("provider") or {})
    kind = provider.pop("kind", "oracle")
    if kind not in ("oracle", "http"):
        raise InvalidConfig(f"provider.kind must be oracle or http, got {kind!r}")
    return Settings(
        cell_size=int(doc.get("cell_size", DEFAULT_CELL_SIZE)),
        search=_build(SearchParams, doc.get("search"), "search"),
        provider_kind=kind,
        provider=_build(ProviderConfig, provider, "provider"),
        experiment=dict(doc.get("experiment") or {}),
    )
