"""Input validation helpers.

All numeric kernels store float32 and accumulate in float64.  These helpers
normalize arbitrary array-likes into validated float32 ndarrays up front so
the kernels themselves can assume clean input.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

# Matrices and vectors are plain numpy arrays; the alias documents intent.
Matrix = np.ndarray


def check_matrix(a, name: str = "matrix") -> np.ndarray:
    """Return `a` as a finite, 2-D, C-contiguous float32 array."""
    arr = np.asarray(a)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got ndim={arr.ndim}")
    if arr.size == 0:
        raise ShapeError(f"{name} must be non-empty, got shape {arr.shape}")
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise ShapeError(f"{name} contains non-finite values")
    return arr


def check_vector(a, name: str = "vector") -> np.ndarray:
    """Return `a` as a finite, 1-D float32 array."""
    arr = np.asarray(a)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got ndim={arr.ndim}")
    if arr.size == 0:
        raise ShapeError(f"{name} must be non-empty")
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise ShapeError(f"{name} contains non-finite values")
    return arr


def check_index(i, n: int, name: str = "index") -> int:
    """Validate an integer index into a container of length `n`."""
    idx = int(i)
    if idx != i or not (0 <= idx < n):
        raise ShapeError(f"{name}={i!r} out of range [0, {n})")
    return idx
