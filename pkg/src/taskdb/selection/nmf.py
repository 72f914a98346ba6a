"""Nonnegative factorization of the model x task transfer matrix.

``V ~= W @ H.T`` with ``W`` (models x k) and ``H`` (tasks x k) both nonnegative.
The default solver is accelerated HALS (exact nonnegative least squares per
column, several inner sweeps per block); Lee-Seung multiplicative updates are
kept as ``method="mu"``. Both leave the objective non-increasing per sweep.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from taskdb import kernels
from taskdb.errors import NegativeEntry, RankTooLarge, ShapeMismatch

EPS = 1e-12


@dataclass(frozen=True)
class TransferMatrix:
    """Observed performance ``values[i, j]`` of model ``model_ids[i]`` on task ``task_ids[j]``."""

    values: np.ndarray
    model_ids: tuple
    task_ids: tuple

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ShapeMismatch(f"transfer matrix must be a non-empty 2-D array, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise NegativeEntry("transfer matrix entries must be finite")
        if np.any(values < 0):
            raise NegativeEntry("transfer matrix entries must be >= 0")
        model_ids = tuple(self.model_ids) if self.model_ids is not None else tuple(range(values.shape[0]))
        task_ids = tuple(self.task_ids) if self.task_ids is not None else tuple(range(values.shape[1]))
        if len(model_ids) != values.shape[0] or len(task_ids) != values.shape[1]:
            raise ShapeMismatch("id lists must match the matrix shape")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "model_ids", model_ids)
        object.__setattr__(self, "task_ids", task_ids)

    @classmethod
    def of(cls, values, model_ids: Sequence | None = None, task_ids: Sequence | None = None) -> "TransferMatrix":
        return cls(np.asarray(values, dtype=np.float64), model_ids, task_ids)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def column(self, task_id) -> np.ndarray:
        return self.values[:, self.task_ids.index(task_id)]


@dataclass(frozen=True)
class EmbeddingSpace:
    W: np.ndarray
    H: np.ndarray
    k: int
    final_error: float
    iterations: int = 0
    seed: int = 0
    model_ids: tuple = ()
    task_ids: tuple = ()
    errors: tuple = field(default=(), repr=False)
    total_sweeps: int = 0      # across every start, bounded by max_iters


def default_rank(m: int, n: int) -> int:
    return min(8, m, n)


def reconstruction_error(V, W: np.ndarray, H: np.ndarray) -> float:
    """``||V - W H^T||_F / ||V||_F``; the absolute error when ``V`` is all zeros."""
    V = V.values if isinstance(V, TransferMatrix) else np.asarray(V, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64)
    if V.ndim != 2 or W.ndim != 2 or H.ndim != 2:
        raise ShapeMismatch("V, W and H must be 2-D")
    if W.shape[0] != V.shape[0] or H.shape[0] != V.shape[1] or W.shape[1] != H.shape[1]:
        raise ShapeMismatch(f"incompatible shapes V{V.shape}, W{W.shape}, H{H.shape}")
    resid = float(np.linalg.norm(V - W @ H.T))
    norm = float(np.linalg.norm(V))
    return resid / norm if norm > 0 else resid


def _mu_sweep(V, W, H):
    W *= (V @ H) / (W @ (H.T @ H) + EPS)
    H *= (V.T @ W) / (H @ (W.T @ W) + EPS)


def _hals_sweep(V, W, H, max_inner):
    kernels.hals_update(W, V @ H, H.T @ H, max_inner, EPS)
    kernels.hals_update(H, V.T @ W, W.T @ W, max_inner, EPS)


def factorize(V, k: int | None = None, max_iters: int = 2000, tol: float = 1e-10, seed: int = 0,
              method: str = "hals", max_inner: int = 20, n_starts: int = 4,
              probe_iters: int = 30) -> EmbeddingSpace:
    """Factorize ``V`` into nonnegative model and task embeddings.

    The objective is nonconvex, so a single start can settle in a poor local
    minimum. ``n_starts`` seeded starts are each run for ``probe_iters``
    sweeps and the lowest-error one is continued; every sweep of every start
    counts against ``max_iters``. Budgets too small for probing, or
    ``n_starts=1``, run the first start alone. A run stops when its relative
    Frobenius error improves by less than ``tol`` between sweeps. The chosen
    run's per-sweep error history is kept on the result.
    """
    tm = V if isinstance(V, TransferMatrix) else TransferMatrix.of(V)
    A = np.ascontiguousarray(tm.values)
    m, n = A.shape
    if k is None:
        k = default_rank(m, n)
    if k < 1 or k > min(m, n):
        raise RankTooLarge(f"k={k} must lie in [1, {min(m, n)}]")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if tol <= 0:
        raise ValueError("tol must be > 0")
    if method not in ("hals", "mu"):
        raise ValueError(f"unknown method {method!r}")
    if n_starts < 1 or probe_iters < 1:
        raise ValueError("n_starts and probe_iters must be >= 1")
    if max_iters < 2 * n_starts * probe_iters:
        n_starts = 1

    rng = np.random.default_rng(seed)
    runs = []
    for _ in range(n_starts):
        # uniform on (0, 1]
        W = np.ascontiguousarray(1.0 - rng.random((m, k)))
        H = np.ascontiguousarray(1.0 - rng.random((n, k)))
        runs.append(_Run(W, H, reconstruction_error(A, W, H)))
    spent = 0
    if n_starts > 1:
        for r in runs:
            spent += r.advance(A, probe_iters, tol, method, max_inner)
    best = min(runs, key=lambda r: r.error)
    spent += best.advance(A, max_iters - spent, tol, method, max_inner)
    W, H = best.W, best.H
    W.flags.writeable = False
    H.flags.writeable = False
    return EmbeddingSpace(W=W, H=H, k=k, final_error=best.error, iterations=len(best.errors), seed=seed,
                          model_ids=tm.model_ids, task_ids=tm.task_ids, errors=tuple(best.errors),
                          total_sweeps=spent)


class _Run:
    """One start of the solver: factors, error history, and whether it has converged."""

    def __init__(self, W, H, error):
        self.W, self.H = W, H
        self.error = error
        self.errors: list = []
        self.done = False

    def advance(self, A, sweeps: int, tol: float, method: str, max_inner: int) -> int:
        """Run up to ``sweeps`` more sweeps; returns how many ran."""
        ran = 0
        while ran < sweeps and not self.done:
            if method == "hals":
                _hals_sweep(A, self.W, self.H, max_inner)
            else:
                _mu_sweep(A, self.W, self.H)
            err = reconstruction_error(A, self.W, self.H)
            self.errors.append(err)
            self.done = self.error - err < tol
            self.error = err
            ran += 1
        return ran
