"""Dense float32 linear algebra kernels used throughout the pipeline.

Storage is float32, accumulation is float64, so results are deterministic for
a given build and reproducible across runs.  The thin SVD is a cyclic Jacobi
eigensolver applied to the Gram matrix of the smaller dimension; it is slow
but self-contained and its convergence is checked explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ParameterError, ShapeError
from .validation import Matrix, check_matrix, check_vector

# Convergence for the Jacobi sweep: off-diagonal mass relative to ||G||_F.
JACOBI_TOL = 1e-10
JACOBI_MAX_SWEEPS = 100


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Multiply two float32 matrices with float64 accumulation."""
    a = check_matrix(a, "a")
    b = check_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.astype(np.float64), b.astype(np.float64))
    return out.astype(np.float32)


def row_softmax(m: Matrix, mask: np.ndarray | None = None) -> Matrix:
    """Row-wise softmax with max subtraction.

    `mask`, if given, is a boolean array of the same shape; entries where the
    mask is False are excluded from the distribution.  A row with no allowed
    entry has no defined distribution and raises.
    """
    m = check_matrix(m, "m")
    x = m.astype(np.float64)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError(f"mask shape {mask.shape} != matrix shape {x.shape}")
        dead = ~mask.any(axis=1)
        if dead.any():
            raise ParameterError(f"row {int(np.flatnonzero(dead)[0])} is fully masked")
        x = np.where(mask, x, -np.inf)
    x = x - x.max(axis=1, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=1, keepdims=True)
    return out.astype(np.float32)


def cosine(a, b) -> float:
    """Cosine similarity of two vectors, clipped into [-1, 1]."""
    a = check_vector(a, "a")
    b = check_vector(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"vector lengths differ: {a.shape[0]} vs {b.shape[0]}")
    x = a.astype(np.float64)
    y = b.astype(np.float64)
    nx = np.linalg.norm(x)
    ny = np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        raise ParameterError("cosine undefined for zero-norm vector")
    return float(np.clip(np.dot(x, y) / (nx * ny), -1.0, 1.0))


def cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine between two equally shaped (N, D) float arrays."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2:
        raise ShapeError(f"row-cosine needs matching 2-D arrays, got {x.shape} vs {y.shape}")
    nx = np.linalg.norm(x, axis=1)
    ny = np.linalg.norm(y, axis=1)
    bad = (nx == 0.0) | (ny == 0.0)
    if bad.any():
        raise ParameterError(f"zero-norm row {int(np.flatnonzero(bad)[0])} in cosine")
    return np.clip((x * y).sum(axis=1) / (nx * ny), -1.0, 1.0)


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD m = u @ diag(singular_values) @ vt with r = min(N, D)."""

    u: Matrix                    # (N, r) float32
    singular_values: np.ndarray  # (r,) float64, descending, >= 0
    vt: Matrix                   # (r, D) float32, rows orthonormal


def _jacobi_eigh(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigendecomposition of a symmetric float64 matrix.

    Returns (eigenvalues, eigenvectors-as-columns), unordered.  Convergence is
    declared when the off-diagonal Frobenius mass falls below JACOBI_TOL
    relative to ||g||_F; exceeding JACOBI_MAX_SWEEPS raises NumericError with
    the achieved residual.
    """
    a = np.array(g, dtype=np.float64, copy=True)
    d = a.shape[0]
    v = np.eye(d)
    scale = np.linalg.norm(a)
    if scale == 0.0:
        return np.zeros(d), v
    for _ in range(JACOBI_MAX_SWEEPS):
        off = a - np.diag(np.diag(a))
        resid = np.linalg.norm(off) / scale
        if resid < JACOBI_TOL:
            return np.diag(a).copy(), v
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = a[p, q]
                if abs(apq) <= JACOBI_TOL * scale * 1e-3:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                if tau >= 0.0:
                    t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                cp = a[:, p].copy()
                cq = a[:, q].copy()
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    off = a - np.diag(np.diag(a))
    resid = float(np.linalg.norm(off) / scale)
    raise NumericError(
        f"Jacobi eigensolver did not converge in {JACOBI_MAX_SWEEPS} sweeps "
        f"(residual {resid:.3e})",
        residual=resid,
    )


def _complete_orthonormal(v: np.ndarray, bad: np.ndarray) -> np.ndarray:
    """Replace the marked columns of `v` with orthonormal fill-ins.

    Columns flagged in `bad` (those divided by a vanishing singular value)
    are rebuilt from canonical basis vectors, orthogonalized against every
    other column.  Deterministic: candidates are tried in index order.
    """
    v = v.copy()
    d = v.shape[0]
    good = [j for j in range(v.shape[1]) if not bad[j]]
    basis = [v[:, j] for j in good]
    for j in np.flatnonzero(bad):
        for cand in range(d):
            w = np.zeros(d)
            w[cand] = 1.0
            for b in basis:
                w -= np.dot(w, b) * b
            n = np.linalg.norm(w)
            if n > 0.5:
                w /= n
                v[:, j] = w
                basis.append(w)
                break
        else:  # pragma: no cover - d independent columns always exist
            raise NumericError("failed to complete orthonormal basis")
    return v


def thin_svd(m: Matrix) -> SvdResult:
    """Thin SVD via Jacobi eigendecomposition of the smaller Gram matrix.

    For an (N, D) input the Gram matrix of the smaller side is formed in
    float64 and diagonalized by cyclic Jacobi rotations; singular vectors of
    the larger side are recovered by one projection.  Vanishing singular
    values yield zero columns in u (reconstruction is unaffected) and
    orthonormal fill-in columns in v.
    """
    m = check_matrix(m, "m")
    a = m.astype(np.float64)
    n, d = a.shape
    r = min(n, d)
    if d <= n:
        lam, v = _jacobi_eigh(a.T @ a)
    else:
        lam, u_full = _jacobi_eigh(a @ a.T)
    if d <= n:
        order = np.argsort(-lam, kind="stable")
        lam = np.clip(lam[order], 0.0, None)
        v = v[:, order]
        sigma = np.sqrt(lam)
        # directions for sigma below the Gram noise floor are unrecoverable
        nz = sigma > sigma[0] * 1e-7
        u = np.zeros((n, r))
        if nz.any():
            u[:, nz] = (a @ v[:, nz]) / sigma[nz]
        return SvdResult(
            u=u.astype(np.float32),
            singular_values=sigma,
            vt=v.T.astype(np.float32),
        )
    order = np.argsort(-lam, kind="stable")
    lam = np.clip(lam[order], 0.0, None)
    u_full = u_full[:, order]
    sigma = np.sqrt(lam)
    nz = sigma > sigma[0] * 1e-7
    v = np.zeros((d, r))
    if nz.any():
        v[:, nz] = (a.T @ u_full[:, nz]) / sigma[nz]
    v = _complete_orthonormal(v, ~nz)
    return SvdResult(
        u=u_full.astype(np.float32),
        singular_values=sigma,
        vt=v.T.astype(np.float32),
    )


def top_k_right_singular(svd: SvdResult, k: int) -> Matrix:
    """Return the leading k right singular vectors as a (D, k) matrix."""
    r = svd.vt.shape[0]
    if not (1 <= k <= r):
        raise ParameterError(f"k={k} out of range [1, {r}]")
    return np.ascontiguousarray(svd.vt[:k].T, dtype=np.float32)
