"""Deterministic affine stand-in models and simulated device execution."""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from taskdb import kernels
from taskdb.backends.cost import DeviceProfile, ModelProfile, batch_seconds
from taskdb.errors import ShapeMismatch
from taskdb.tensor import Mvec


@dataclass
class StubModel:
    """A chain of affine maps ``x -> A x + b`` built from catalog layers.

    Inputs are flattened row tensors of ``input_shape``; outputs are 1-D.
    """

    model_id: int | None
    layers: list
    profile: ModelProfile = field(default_factory=lambda: ModelProfile(0.0, 0.0))
    input_shape: tuple | None = None

    def __post_init__(self):
        if not self.layers:
            raise ShapeMismatch("a stub model needs at least one affine layer")
        fixed = []
        for A, b in self.layers:
            A = np.ascontiguousarray(A, dtype=np.float64)
            b = np.zeros(A.shape[0]) if b is None else np.ascontiguousarray(b, dtype=np.float64).reshape(-1)
            if A.ndim != 2 or b.shape[0] != A.shape[0]:
                raise ShapeMismatch(f"bad affine layer shapes {A.shape} / {b.shape}")
            fixed.append((A, b))
        for (A0, _), (A1, _) in zip(fixed, fixed[1:]):
            if A1.shape[1] != A0.shape[0]:
                raise ShapeMismatch(f"layer widths do not chain: {A0.shape} -> {A1.shape}")
        self.layers = fixed
        if self.input_shape is None:
            self.input_shape = (fixed[0][0].shape[1],)
        self.input_shape = tuple(self.input_shape)
        if int(np.prod(self.input_shape)) != self.input_dim:
            raise ShapeMismatch(f"input shape {self.input_shape} does not flatten to width {self.input_dim}")

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    @classmethod
    def identity(cls, dim: int, profile: ModelProfile | None = None, model_id=None) -> "StubModel":
        return cls(model_id, [(np.eye(dim), np.zeros(dim))], profile or ModelProfile(0.0, 0.0))

    @classmethod
    def from_assembled(cls, model, input_shape: tuple | None = None) -> "StubModel":
        """Build from an ``AssembledModel``: each layer's weight is (out, in), bias (out,)."""
        layers = []
        for layer in model.layers:
            W = layer.weight.to_array()
            if W.ndim != 2:
                W = W.reshape(W.shape[0], -1)
            layers.append((W, None if layer.bias is None else layer.bias.data))
        arch = model.architecture or {}
        shape = input_shape or (tuple(arch["input_shape"]) if "input_shape" in arch else None)
        return cls(model.record.model_id, layers, model.record.profile, shape)

    def forward(self, X: np.ndarray) -> np.ndarray:
        Y = np.ascontiguousarray(X, dtype=np.float64).reshape(len(X), -1)
        if Y.shape[1] != self.input_dim:
            raise ShapeMismatch(f"model expects width {self.input_dim}, got {Y.shape[1]}")
        for A, b in self.layers:
            Y = kernels.affine_rows(A, b, Y)
        return Y


_device_locks: dict[str, threading.Lock] = {}
_registry_lock = threading.Lock()


def device_lock(d: DeviceProfile) -> threading.Lock:
    """Per-device lock; batches on one simulated device run one at a time."""
    with _registry_lock:
        return _device_locks.setdefault(d.name, threading.Lock())


def check_rows(model: StubModel, batch: Sequence[Mvec]) -> None:
    for i, row in enumerate(batch):
        if row.shape != model.input_shape:
            raise ShapeMismatch(f"row {i} has shape {list(row.shape)}, model expects {list(model.input_shape)}")


def run_stacked(model: StubModel, stacked: np.ndarray, d: DeviceProfile,
                realtime: bool = False) -> tuple[np.ndarray, float]:
    """Run a stacked ``[n, *input_shape]`` batch; returns outputs and simulated seconds."""
    n = stacked.shape[0]
    elapsed = batch_seconds(model.profile, d, n)
    with device_lock(d):
        out = model.forward(stacked.reshape(n, -1)) if n else np.empty((0, model.output_dim))
        if realtime:
            time.sleep(elapsed)
    return out, elapsed


def run_batch(model: StubModel, batch: Sequence[Mvec], d: DeviceProfile,
              realtime: bool = False) -> tuple[list[Mvec], float]:
    check_rows(model, batch)
    stacked = (np.stack([row.data for row in batch]) if batch
               else np.empty((0, model.input_dim)))
    out, elapsed = run_stacked(model, stacked, d, realtime)
    return [Mvec((model.output_dim,), row) for row in out], elapsed
