import hashlib
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from taskdb import _kernels_py, kernels

BACKENDS = kernels.available_backends()
compiled = pytest.mark.skipif("compiled" not in BACKENDS, reason="compiled core not built")


def fnv_trigram_oracle(data: bytes, dim: int, seed: int) -> np.ndarray:
    """Hand-written FNV-1a trigram hashing, independent of both backends."""
    mask = (1 << 64) - 1
    h0 = 0xcbf29ce484222325
    for i in range(8):
        h0 = ((h0 ^ ((seed >> (8 * i)) & 0xFF)) * 0x100000001b3) & mask
    grams = [data[i:i + 3] for i in range(len(data) - 2)] if len(data) >= 3 else ([data] if data else [])
    v = np.zeros(dim)
    for g in grams:
        h = h0
        for byte in g:
            h = ((h ^ byte) * 0x100000001b3) & mask
        v[h % dim] += -1.0 if h >> 63 else 1.0
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def hals_oracle(X, A, B, sweeps):
    X = X.copy()
    for _ in range(sweeps):
        for j in range(X.shape[1]):
            X[:, j] = np.maximum(0.0, X[:, j] + (A[:, j] - X @ B[:, j]) / max(B[j, j], 1e-12))
    return X


def test_backend_name():
    assert kernels.BACKEND in ("compiled", "python")
    assert "python" in BACKENDS


def test_pure_python_switch():
    env = dict(os.environ, TASKDB_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from taskdb import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@pytest.mark.parametrize("name", sorted(BACKENDS))
@pytest.mark.parametrize("data", [b"", b"a", b"ab", b"abc", "héllo wörld".encode(), bytes(range(256))])
def test_hash_features_matches_oracle(name, data):
    mod = BACKENDS[name]
    arg = data if name == "python" else np.frombuffer(data, dtype=np.uint8)
    got = mod.hash_features(arg, 16, 3)
    assert np.array_equal(got, fnv_trigram_oracle(data, 16, 3))


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_hals_matches_oracle(name):
    rng = np.random.default_rng(0)
    V = rng.uniform(size=(12, 9))
    Y = rng.uniform(size=(9, 3))
    X = rng.uniform(size=(12, 3))
    A, B = V @ Y, Y.T @ Y
    got = np.ascontiguousarray(X.copy())
    sweeps = BACKENDS[name].hals_update(got, A, B, 4, 1e-12, 0.0)
    assert sweeps == 4
    assert np.allclose(got, hals_oracle(X, A, B, 4), rtol=1e-12, atol=1e-14)


def test_affine_rows_shape_errors():
    with pytest.raises(ValueError):
        kernels.affine_rows(np.ones((2, 3)), np.ones(2), np.ones((4, 2)))
    with pytest.raises(ValueError):
        kernels.affine_rows(np.ones((2, 3)), np.ones(3), np.ones((4, 3)))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 12), st.integers(1, 8), st.integers(1, 8))
def test_prop_affine_rows_close_to_numpy_and_batch_independent(seed, n, fan_in, fan_out):
    rng = np.random.default_rng(seed)
    A, b, X = rng.normal(size=(fan_out, fan_in)), rng.normal(size=fan_out), rng.normal(size=(n, fan_in))
    for mod in BACKENDS.values():
        Y = mod.affine_rows(A, b, X)
        assert np.allclose(Y, X @ A.T + b, rtol=1e-12, atol=1e-12)
        # any row computed alone is bit-identical to the same row inside a batch
        for i in range(n):
            assert mod.affine_rows(A, b, X[i:i + 1])[0].tobytes() == Y[i].tobytes()


@compiled
@settings(max_examples=100, deadline=None)
@given(st.binary(max_size=200), st.integers(1, 64), st.integers(0, 2**64 - 1))
def test_prop_hash_features_bit_identical_across_backends(data, dim, seed):
    a = _kernels_py.hash_features(data, dim, seed)
    b = BACKENDS["compiled"].hash_features(np.frombuffer(data, dtype=np.uint8), dim, seed)
    assert a.tobytes() == b.tobytes()


@compiled
@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 15), st.integers(1, 4))
def test_prop_hals_backends_agree(seed, n, k):
    rng = np.random.default_rng(seed)
    V, Y = rng.uniform(size=(n, 7)), rng.uniform(size=(7, k))
    A, B = V @ Y, Y.T @ Y
    X0 = rng.uniform(size=(n, k))
    out = []
    for mod in (_kernels_py, BACKENDS["compiled"]):
        X = np.ascontiguousarray(X0.copy())
        s = mod.hals_update(X, A, B, 10, 1e-12, 0.01)
        out.append((s, X))
    assert out[0][0] == out[1][0]
    assert np.allclose(out[0][1], out[1][1], rtol=1e-10, atol=1e-12)


def test_dispatch_uses_active_backend():
    data = b"dispatch"
    got = kernels.hash_features(data, 8, 1)
    assert np.array_equal(got, fnv_trigram_oracle(data, 8, 1))
    assert hashlib.sha256(got.tobytes()).hexdigest() == hashlib.sha256(
        _kernels_py.hash_features(data, 8, 1).tobytes()).hexdigest()
