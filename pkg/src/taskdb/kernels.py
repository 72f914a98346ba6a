"""Hot-loop kernels, compiled when available.

The Cython extension ``taskdb._kernels`` is used if it imports; otherwise the
numpy fallback in ``taskdb._kernels_py`` is used. Setting ``TASKDB_PURE_PYTHON=1``
forces the fallback. ``BACKEND`` names the active implementation.
"""

from __future__ import annotations

import os
from types import ModuleType

import numpy as np

from taskdb import _kernels_py


def _load_compiled() -> ModuleType | None:
    if os.environ.get("TASKDB_PURE_PYTHON", "") not in ("", "0"):
        return None
    try:
        from taskdb import _kernels
    except ImportError:
        return None
    return _kernels


_compiled = _load_compiled()
_impl: ModuleType = _compiled if _compiled is not None else _kernels_py
BACKEND = "compiled" if _compiled is not None else "python"


def available_backends() -> dict[str, ModuleType]:
    backends = {"python": _kernels_py}
    try:
        from taskdb import _kernels

        backends["compiled"] = _kernels
    except ImportError:
        pass
    return backends


def hals_update(X: np.ndarray, A: np.ndarray, B: np.ndarray, max_inner: int = 20,
                eps: float = 1e-12, inner_tol: float = 0.01) -> int:
    """In-place HALS sweeps; see ``_kernels.pyx``. X must be C-contiguous float64."""
    return _impl.hals_update(X, np.ascontiguousarray(A), np.ascontiguousarray(B),
                             int(max_inner), float(eps), float(inner_tol))


def affine_rows(A: np.ndarray, b: np.ndarray, X: np.ndarray) -> np.ndarray:
    return _impl.affine_rows(np.ascontiguousarray(A, dtype=np.float64),
                             np.ascontiguousarray(b, dtype=np.float64),
                             np.ascontiguousarray(X, dtype=np.float64))


def hash_features(data: bytes, dim: int, seed: int = 0) -> np.ndarray:
    buf = np.frombuffer(bytes(data), dtype=np.uint8)
    if _impl is _kernels_py:
        return _impl.hash_features(buf.tobytes(), dim, seed)
    return _impl.hash_features(np.ascontiguousarray(buf), dim, seed & ((1 << 64) - 1))
