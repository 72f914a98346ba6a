"""Pure-Python/numpy fallback for the compiled kernels in ``_kernels.pyx``."""

import math

import numpy as np

_FNV_OFFSET = 14695981039346656037
_FNV_PRIME = 1099511628211
_MASK = (1 << 64) - 1


def hals_update(X, A, B, max_inner, eps, inner_tol):
    n, k = X.shape
    first = 0.0
    for s in range(max_inner):
        delta = 0.0
        for j in range(k):
            d = max(B[j, j], eps)
            old = X[:, j].copy()
            X[:, j] = np.maximum(0.0, old + (A[:, j] - X @ B[:, j]) / d)
            delta += float(np.sum((X[:, j] - old) ** 2))
        if s == 0:
            first = delta
        elif delta <= inner_tol * inner_tol * first:
            return s + 1
    return max_inner


def affine_rows(A, b, X):
    if X.shape[1] != A.shape[1]:
        raise ValueError(f"input width {X.shape[1]} does not match kernel width {A.shape[1]}")
    if b.shape[0] != A.shape[0]:
        raise ValueError(f"bias length {b.shape[0]} does not match kernel height {A.shape[0]}")
    out = np.empty((X.shape[0], A.shape[0]), dtype=np.float64)
    # per-row products keep results independent of how rows are batched
    for r in range(X.shape[0]):
        out[r] = A @ X[r] + b
    return out


def hash_features(data, dim, seed):
    if dim < 1:
        raise ValueError("dim must be >= 1")
    data = bytes(data)
    v = [0.0] * dim
    base = _FNV_OFFSET
    for byte in range(8):
        base ^= (seed >> (8 * byte)) & 0xFF
        base = (base * _FNV_PRIME) & _MASK
    n = len(data)
    if n == 0:
        return np.zeros(dim, dtype=np.float64)
    count = n - 2 if n >= 3 else 1
    width = 3 if n >= 3 else n
    for i in range(count):
        h = base
        for t in range(width):
            h ^= data[i + t]
            h = (h * _FNV_PRIME) & _MASK
        if h >> 63 == 0:
            v[h % dim] += 1.0
        else:
            v[h % dim] -= 1.0
    norm = 0.0
    for x in v:
        norm += x * x
    norm = math.sqrt(norm)
    if norm > 0.0:
        v = [x / norm for x in v]
    return np.array(v, dtype=np.float64)
