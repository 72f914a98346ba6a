"""Task feature extractors and the feature -> task-embedding regressors."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from taskdb import kernels
from taskdb.errors import DimensionMismatch, ExtractorFailure, FewerThanTwoSamples
from taskdb.tensor import Mvec, mvec_deserialize


@dataclass(frozen=True)
class TaskFeatures:
    vector: np.ndarray
    extractor_id: str = "precomputed"

    def __post_init__(self):
        v = np.array(self.vector, dtype=np.float64).reshape(-1)
        if v.size == 0 or not np.all(np.isfinite(v)):
            raise DimensionMismatch("task features must be a non-empty finite vector")
        v.flags.writeable = False
        object.__setattr__(self, "vector", v)


@dataclass(frozen=True)
class TaskEmbedding:
    vector: np.ndarray


class Extractor(Protocol):
    extractor_id: str
    dim: int

    def extract(self, raw) -> np.ndarray: ...


class HashingExtractor:
    """Deterministic stand-in for a large vision/language encoder.

    Hashes byte trigrams of the input into ``dim`` signed buckets and
    L2-normalizes. Text is UTF-8 encoded first.
    """

    def __init__(self, dim: int = 32, seed: int = 0):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = dim
        self.seed = seed
        self.extractor_id = f"hash{dim}s{seed}"
        self.calls = 0

    def extract(self, raw) -> np.ndarray:
        if isinstance(raw, str):
            raw = raw.encode("utf-8")
        elif isinstance(raw, Mvec):
            raw = raw.data.tobytes()
        elif not isinstance(raw, (bytes, bytearray, memoryview)):
            raise ExtractorFailure(f"{self.extractor_id} cannot embed {type(raw).__name__}")
        self.calls += 1
        return kernels.hash_features(bytes(raw), self.dim, self.seed)

    def features(self, raw) -> TaskFeatures:
        return TaskFeatures(self.extract(raw), self.extractor_id)


class PrecomputedExtractor:
    """Reads feature vectors from ``<root>/<key>.mvec`` or ``<root>/<key>.txt``."""

    extractor_id = "precomputed"

    def __init__(self, root: str | os.PathLike, dim: int | None = None):
        self.root = Path(root)
        self.dim = dim
        self.calls = 0

    def path_for(self, key: str) -> Path:
        for suffix in (".mvec", ".txt"):
            p = self.root / f"{key}{suffix}"
            if p.exists():
                return p
        raise ExtractorFailure(f"no feature file for {key!r} under {self.root}")

    def extract(self, key) -> np.ndarray:
        p = self.path_for(str(key))
        self.calls += 1
        if p.suffix == ".mvec":
            vec = mvec_deserialize(p.read_bytes()).data.copy()
        else:
            vec = np.array(p.read_text().split(), dtype=np.float64)
        if self.dim is not None and vec.size != self.dim:
            raise DimensionMismatch(f"{p.name}: expected {self.dim} features, got {vec.size}")
        return vec

    def features(self, key) -> TaskFeatures:
        return TaskFeatures(self.extract(key), self.extractor_id)


class Regressor(Protocol):
    dim: int

    def predict(self, x: np.ndarray) -> np.ndarray: ...


def _stack_features(features: Sequence) -> np.ndarray:
    rows = [f.vector if isinstance(f, TaskFeatures) else np.asarray(f, dtype=np.float64).reshape(-1)
            for f in features]
    widths = {r.size for r in rows}
    if len(widths) > 1:
        raise DimensionMismatch(f"feature vectors have differing lengths {sorted(widths)}")
    return np.vstack(rows)


class KNNRegressor:
    """Inverse-distance-weighted k-nearest-neighbour regression.

    An input that coincides with a training point returns that point's target
    exactly. Neighbour ties are broken by training order.
    """

    def __init__(self, X: np.ndarray, Y: np.ndarray, k: int = 3):
        self.X = np.asarray(X, dtype=np.float64)
        self.Y = np.asarray(Y, dtype=np.float64)
        self.k = k
        self.dim = self.X.shape[1]

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        if x.size != self.dim:
            raise DimensionMismatch(f"expected {self.dim} features, got {x.size}")
        d = np.sqrt(np.sum((self.X - x) ** 2, axis=1))
        order = np.argsort(d, kind="stable")[: min(self.k, len(d))]
        if d[order[0]] == 0.0:
            return self.Y[order[0]].copy()
        w = 1.0 / d[order]
        return (w[:, None] * self.Y[order]).sum(axis=0) / w.sum()


class ForestRegressor:
    """Random-forest regressor backed by scikit-learn (optional dependency)."""

    def __init__(self, X: np.ndarray, Y: np.ndarray, n_estimators: int = 100, seed: int = 0):
        from sklearn.ensemble import RandomForestRegressor

        self.dim = X.shape[1]
        self._model = RandomForestRegressor(n_estimators=n_estimators, random_state=seed)
        self._model.fit(X, Y)

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(1, -1)
        if x.shape[1] != self.dim:
            raise DimensionMismatch(f"expected {self.dim} features, got {x.shape[1]}")
        return np.asarray(self._model.predict(x)).reshape(-1)


def fit_regressor(features: Sequence, H: np.ndarray, kind: str = "knn", **kwargs) -> Regressor:
    """Fit the feature -> embedding map on the historical tasks (rows of ``H``)."""
    H = np.asarray(H, dtype=np.float64)
    if len(features) != H.shape[0]:
        raise DimensionMismatch(f"{len(features)} feature vectors for {H.shape[0]} task embeddings")
    if len(features) < 2:
        raise FewerThanTwoSamples("a regressor needs at least two training tasks")
    X = _stack_features(features)
    if kind == "knn":
        return KNNRegressor(X, H, **kwargs)
    if kind == "forest":
        return ForestRegressor(X, H, **kwargs)
    raise ValueError(f"unknown regressor kind {kind!r}")


def project_task(r: Regressor, f) -> TaskEmbedding:
    """Map new-task features into the embedding space, clamped to be nonnegative."""
    vec = f.vector if isinstance(f, TaskFeatures) else np.asarray(f, dtype=np.float64).reshape(-1)
    if vec.size != r.dim:
        raise DimensionMismatch(f"expected {r.dim} features, got {vec.size}")
    return TaskEmbedding(np.maximum(r.predict(vec), 0.0))
