"""Content-addressed embedding cache shared across queries."""

from __future__ import annotations

import hashlib
import threading
from collections import OrderedDict

import numpy as np

from taskdb.errors import ExtractorFailure
from taskdb.tensor import Mvec


def raw_bytes(raw) -> bytes:
    if isinstance(raw, str):
        return raw.encode("utf-8")
    if isinstance(raw, (bytes, bytearray, memoryview)):
        return bytes(raw)
    if isinstance(raw, Mvec):
        return raw.data.tobytes()
    raise ExtractorFailure(f"cannot embed a value of type {type(raw).__name__}")


def content_key(extractor_id: str, raw) -> tuple[str, str]:
    return extractor_id, hashlib.sha256(raw_bytes(raw)).hexdigest()


class EmbeddingCache:
    """LRU map ``(extractor_id, sha256(raw)) -> Mvec``, safe for concurrent use."""

    def __init__(self, capacity: int = 4096):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._entries: OrderedDict = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, key):
        with self._lock:
            value = self._entries.get(key)
            if value is None:
                self.misses += 1
                return None
            self._entries.move_to_end(key)
            self.hits += 1
            return value

    def put(self, key, value: Mvec) -> None:
        with self._lock:
            self._entries[key] = value
            self._entries.move_to_end(key)
            while len(self._entries) > self.capacity:
                self._entries.popitem(last=False)

    def clear(self) -> None:
        with self._lock:
            self._entries.clear()
            self.hits = self.misses = 0

    @property
    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0


def extract(extractor, raw) -> Mvec:
    try:
        vec = extractor.extract(raw)
    except ExtractorFailure:
        raise
    except Exception as exc:  # noqa: BLE001 - any extractor fault is reported uniformly
        raise ExtractorFailure(f"{extractor.extractor_id}: {exc}") from exc
    return Mvec.from_array(np.asarray(vec, dtype=np.float64).reshape(-1))


def embed_or_fetch(cache: EmbeddingCache | None, extractor, raw) -> Mvec:
    """Embedding of ``raw``; a cache hit skips the extractor entirely."""
    if cache is None:
        return extract(extractor, raw)
    key = content_key(extractor.extractor_id, raw)
    hit = cache.get(key)
    if hit is not None:
        return hit
    value = extract(extractor, raw)
    cache.put(key, value)
    return value
