"""Synthetic model zoo: calibrated workload profiles, affine stub weights, and
seeded transfer-matrix problems with known ground truth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from taskdb.backends.cost import ModelProfile
from taskdb.model_repo import BaseModel, LayerRecord, ModelRepo, pack_blob
from taskdb.selection.nmf import TransferMatrix
from taskdb.tensor import Mvec

# Per-row workload of the four task families. Image rows are 3x224x224 float32
# inputs plus activations; the others are small.
PROFILES = {
    "series": ModelProfile(model_flops=1e4, model_size=4e4, row_bytes=1.3e2),
    "text_light": ModelProfile(model_flops=2e4, model_size=2e5, row_bytes=2.6e2),
    "text_heavy": ModelProfile(model_flops=1e9, model_size=4e8, row_bytes=2e5),
    "image": ModelProfile(model_flops=4e9, model_size=1e8, row_bytes=1.2e6),
}

# Shapes of the stub models standing in for each family.
IMAGE_SHAPE = (3, 8, 8)
SERIES_LEN = 16
TEXT_DIM = 32


def affine_layers(rng: np.random.Generator, widths: list[int], name_prefix: str = "fc") -> list[LayerRecord]:
    """Random affine chain ``widths[0] -> widths[1] -> ...`` as catalog layers."""
    layers = []
    for i, (n_in, n_out) in enumerate(zip(widths, widths[1:])):
        W = rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_out, n_in))
        b = rng.normal(0.0, 0.1, size=n_out)
        layers.append(LayerRecord(None, f"{name_prefix}{i}", i, Mvec.from_array(W), Mvec.from_array(b)))
    return layers


def perturb(layers: list[LayerRecord], rng: np.random.Generator, scale: float = 0.05) -> list[LayerRecord]:
    """A fine-tuned variant: same shapes, weights nudged."""
    out = []
    for l in layers:
        W = l.weight.to_array() + rng.normal(0.0, scale, size=l.weight.shape)
        b = None if l.bias is None else Mvec.from_array(l.bias.to_array() + rng.normal(0.0, scale, l.bias.shape))
        out.append(LayerRecord(None, l.layer_name, l.layer_index, Mvec.from_array(W), b))
    return out


def register_family(repo: ModelRepo, base_name: str, widths: list[int], variants: int, profile: ModelProfile,
                    rng: np.random.Generator, input_shape: tuple | None = None,
                    blob_variants: int = 0) -> list[int]:
    """Register ``variants`` decoupled and ``blob_variants`` blob models sharing one base."""
    root = affine_layers(rng, widths)
    repo.register_base(BaseModel.of_layers(base_name, root))
    arch = {"base": base_name, "input_shape": list(input_shape or (widths[0],))}
    ids = []
    for v in range(variants):
        layers = perturb(root, rng)
        ids.append(repo.register_decoupled_model(f"{base_name}-ft{v}", "1.0", base_name, layers, profile))
    for v in range(blob_variants):
        layers = perturb(root, rng)
        ids.append(repo.register_blob_model(f"{base_name}-blob{v}", "1.0", pack_blob(arch, layers), profile))
    return ids


@dataclass(frozen=True)
class TransferProblem:
    """Ground-truth factors, observed matrix, task features, and held-out tasks."""

    W0: np.ndarray
    H0: np.ndarray
    train: TransferMatrix
    train_features: np.ndarray
    holdout: TransferMatrix
    holdout_features: np.ndarray
    holdout_source: np.ndarray


def make_transfer_problem(n_models: int = 20, n_tasks: int = 15, k: int = 3, feature_dim: int = 32,
                          n_holdout: int = 100, noise: float = 0.01, seed: int = 0,
                          model_ids=None) -> TransferProblem:
    """Seeded zoo whose transfer matrix is exactly ``W0 @ H0.T``.

    Task features are a random linear image of the latent task factors, so
    tasks close in feature space transfer alike. Each held-out task copies a
    training task's features plus isotropic noise whose norm is ``noise``
    times the feature norm; its true transfer column is the source column.
    """
    rng = np.random.default_rng(seed)
    W0 = rng.uniform(0.0, 1.0, size=(n_models, k))
    H0 = rng.uniform(0.0, 1.0, size=(n_tasks, k))
    V = W0 @ H0.T
    P = rng.normal(size=(k, feature_dim))
    F = H0 @ P
    src = rng.integers(0, n_tasks, size=n_holdout)
    G = np.empty((n_holdout, feature_dim))
    for i, j in enumerate(src):
        e = rng.normal(size=feature_dim)
        G[i] = F[j] + e / np.linalg.norm(e) * noise * np.linalg.norm(F[j])
    mids = tuple(model_ids) if model_ids is not None else tuple(range(1, n_models + 1))
    train = TransferMatrix(V, mids, tuple(f"t{j}" for j in range(n_tasks)))
    holdout = TransferMatrix(V[:, src], mids, tuple(f"h{i}" for i in range(n_holdout)))
    return TransferProblem(W0, H0, train, F, holdout, G, src)
