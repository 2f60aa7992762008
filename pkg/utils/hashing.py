"""Stable identifiers for configurations, datasets and manifests."""

from __future__ import annotations

import hashlib
import json
from typing import Any, Mapping

from pydantic import BaseModel


def _normalize(value: Any) -> Any:
    """把 pydantic 模型统一成可 JSON 序列化的结构，保证哈希稳定。"""

    if isinstance(value, BaseModel):
        return value.model_dump(mode="json")
    if isinstance(value, Mapping):
        return {str(key): _normalize(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_normalize(item) for item in value]
    return value


def canonical_json(value: Any) -> str:
    """Serialize with sorted keys and no whitespace so equal configs hash equally."""

    return json.dumps(_normalize(value), sort_keys=True, separators=(",", ":"))


def config_hash(value: Any, *, length: int = 16) -> str:
    """Short sha256 digest of the canonical JSON form of ``value``."""

    digest = hashlib.sha256(canonical_json(value).encode("utf-8")).hexdigest()
    return digest[:length]


def file_hash(path: Any, *, length: int = 16) -> str:
    """Short sha256 digest of a file's bytes."""

    sha = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            sha.update(chunk)
    return sha.hexdigest()[:length]


__all__ = ["canonical_json", "config_hash", "file_hash"]
