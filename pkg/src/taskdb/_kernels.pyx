# Compiled hot loops. Semantics must match taskdb/_kernels_py.py exactly;
# hash_features is additionally required to be bit-identical across backends.
import numpy as np

from libc.math cimport sqrt
from libc.stdint cimport uint64_t

cdef uint64_t FNV_OFFSET = 14695981039346656037ULL
cdef uint64_t FNV_PRIME = 1099511628211ULL


def hals_update(double[:, ::1] X, const double[:, ::1] A, const double[:, ::1] B,
                int max_inner, double eps, double inner_tol):
    """Run up to ``max_inner`` HALS column sweeps on X in place.

    X is (rows, k); A = V @ Y and B = Y.T @ Y for the fixed opposite factor Y.
    Sweeping stops early once a sweep moves X by less than ``inner_tol`` times
    the movement of the first sweep. Returns the number of sweeps performed.
    """
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t k = X.shape[1]
    cdef Py_ssize_t i, j, l
    cdef int s
    cdef double acc, d, old, new, delta, first = 0.0
    for s in range(max_inner):
        delta = 0.0
        for j in range(k):
            d = B[j, j]
            if d < eps:
                d = eps
            for i in range(n):
                acc = A[i, j]
                for l in range(k):
                    acc -= X[i, l] * B[l, j]
                old = X[i, j]
                new = old + acc / d
                if new < 0.0:
                    new = 0.0
                X[i, j] = new
                delta += (new - old) * (new - old)
        if s == 0:
            first = delta
        elif delta <= inner_tol * inner_tol * first:
            return s + 1
    return max_inner


def affine_rows(const double[:, ::1] A, const double[::1] b, const double[:, ::1] X):
    """Y[r] = A @ X[r] + b, accumulated in a fixed order per row."""
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t m = A.shape[0]
    cdef Py_ssize_t p = A.shape[1]
    if X.shape[1] != p:
        raise ValueError(f"input width {X.shape[1]} does not match kernel width {p}")
    if b.shape[0] != m:
        raise ValueError(f"bias length {b.shape[0]} does not match kernel height {m}")
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] Y = out
    cdef Py_ssize_t r, o, j
    cdef double acc
    for r in range(n):
        for o in range(m):
            acc = b[o]
            for j in range(p):
                acc += A[o, j] * X[r, j]
            Y[r, o] = acc
    return out


def hash_features(const unsigned char[::1] data, Py_ssize_t dim, uint64_t seed):
    """Signed feature hashing of byte trigrams followed by L2 normalization."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    out = np.zeros(dim, dtype=np.float64)
    cdef double[::1] v = out
    cdef Py_ssize_t n = data.shape[0]
    cdef Py_ssize_t i, t, width, count
    cdef uint64_t h, base = FNV_OFFSET
    cdef int byte
    for byte in range(8):
        base ^= (seed >> (8 * byte)) & 0xFF
        base *= FNV_PRIME
    if n == 0:
        return out
    count = n - 2 if n >= 3 else 1
    width = 3 if n >= 3 else n
    for i in range(count):
        h = base
        for t in range(width):
            h ^= data[i + t]
            h *= FNV_PRIME
        if (h >> 63) == 0:
            v[h % dim] += 1.0
        else:
            v[h % dim] -= 1.0
    cdef double norm = 0.0
    for i in range(dim):
        norm += v[i] * v[i]
    norm = sqrt(norm)
    if norm > 0.0:
        for i in range(dim):
            v[i] = v[i] / norm
    return out
