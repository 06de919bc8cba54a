"""Dense matrix helpers, deterministic SVD and k-rank selection.

Matrices are plain 2-D ``float64`` numpy arrays. :func:`as_matrix` is the
single validation point; everything else assumes its output.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import DegenerateInputError, DimensionError, NumericalError

# Singular values below this fraction of the largest one count as zero.
RANK_TOL = 1e-10


class SvdResult(NamedTuple):
    u: np.ndarray
    sigma: np.ndarray
    vt: np.ndarray


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Return ``a`` as a finite 2-D float64 array or raise."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{name} contains NaN or Inf")
    return arr


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def transpose(a) -> np.ndarray:
    return as_matrix(a).T.copy()


def frobenius_norm_sq(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(np.sum(a * a))


def svd(a) -> SvdResult:
    """Thin SVD with a fixed sign convention.

    Each left singular vector is flipped so that its entry of largest
    magnitude is non-negative (first such entry on ties); the matching row
    of ``vt`` is flipped with it, so the product is unchanged.
    """
    a = as_matrix(a)
    if a.size == 0:
        raise DimensionError("cannot factorize an empty matrix")
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD did not converge: {exc}") from exc
    if u.shape[1]:
        pivots = np.argmax(np.abs(u), axis=0)
        signs = np.where(u[pivots, np.arange(u.shape[1])] < 0, -1.0, 1.0)
        u = u * signs
        vt = vt * signs[:, None]
    return SvdResult(u, s, vt)


def effective_rank(sigma) -> int:
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.size == 0 or sigma[0] <= 0:
        return 0
    return int(np.count_nonzero(sigma >= RANK_TOL * sigma.max()))


def select_rank(sigma, epsilon_th: float) -> int:
    """Smallest ``k`` whose leading singular values hold ``epsilon_th`` of the energy.

    >>> select_rank([3.0, 1.0], 0.9)
    1
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if not 0.0 < epsilon_th < 1.0:
        raise ValueError(f"epsilon_th must lie in (0, 1), got {epsilon_th}")
    if sigma.ndim != 1 or sigma.size == 0:
        raise DimensionError("sigma must be a non-empty vector")
    if np.any(sigma < 0) or np.any(np.diff(sigma) > 0):
        raise ValueError("sigma must be non-negative and non-increasing")
    nnz = effective_rank(sigma)
    if nnz == 0:
        raise DegenerateInputError("all singular values are zero")
    energy = np.cumsum(sigma[:nnz] ** 2)
    k = int(np.searchsorted(energy, epsilon_th * np.sum(sigma**2))) + 1
    return min(max(k, 1), nnz)


def gram_schmidt_extend(basis: np.ndarray, new: np.ndarray, drop_tol: float = 1e-8):
    """Append the columns of ``new`` to the orthonormal ``basis``.

    Modified Gram-Schmidt, two passes per column. A column whose remaining
    norm falls below ``drop_tol`` is discarded. Existing columns are never
    modified. Returns ``(extended_basis, kept_indices)``.
    """
    cols = [basis[:, i] for i in range(basis.shape[1])]
    kept = []
    for j in range(new.shape[1]):
        v = new[:, j].astype(np.float64, copy=True)
        norm0 = np.linalg.norm(v)
        for _ in range(2):
            for q in cols:
                v -= (q @ v) * q
        norm = np.linalg.norm(v)
        if norm0 == 0 or norm < drop_tol:
            continue
        cols.append(v / norm)
        kept.append(j)
    rows = basis.shape[0]
    out = np.column_stack(cols) if cols else np.zeros((rows, 0))
    return out, kept
