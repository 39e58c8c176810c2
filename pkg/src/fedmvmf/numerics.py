"""Minimal dense linear algebra used by the closed-form factor updates.

Everything operates on C-contiguous float64 2-D numpy arrays. Factor
matrices are stored row-major with entities (users, items, features) as
rows and the latent dimensions as columns. All systems solved here are
small (k x k with k <= ~32) and positive definite by construction, so a
plain Cholesky factorization with a fixed pivot floor is enough.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_solve

DenseMatrix = np.ndarray

#: Cholesky pivots at or below this are treated as a singular system.
CHOLESKY_PIVOT_FLOOR = 1e-12


class SingularSystemError(ValueError):
    """A normal-equation matrix was not positive definite."""


def as_matrix(a, name: str = "matrix") -> DenseMatrix:
    """Coerce to a C-contiguous float64 2-D array."""
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got ndim={arr.ndim}")
    return arr


def require_finite(a: np.ndarray, name: str = "result") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def matmul(a: DenseMatrix, b: DenseMatrix) -> DenseMatrix:
    """Matrix product with explicit shape checking."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"cannot multiply {a.shape} by {b.shape}: inner dimensions differ")
    return require_finite(a @ b, "matmul result")


def cholesky(a: DenseMatrix) -> DenseMatrix:
    """Lower-triangular Cholesky factor, rejecting near-singular input.

    Raises SingularSystemError if the factorization fails or any pivot
    (squared diagonal of the factor) is <= CHOLESKY_PIVOT_FLOOR.
    """
    a = as_matrix(a, "a")
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"matrix must be square, got {a.shape}")
    try:
        lower = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"matrix of shape {a.shape} is not positive definite") from exc
    diag = np.diagonal(lower)
    if np.min(diag * diag) <= CHOLESKY_PIVOT_FLOOR:
        raise SingularSystemError(
            f"Cholesky pivot {float(np.min(diag * diag)):.3e} at or below floor {CHOLESKY_PIVOT_FLOOR:.0e}"
        )
    return lower


def solve_spd(a: DenseMatrix, b: np.ndarray) -> np.ndarray:
    """Solve a @ x = b for symmetric positive definite a.

    b may be a vector or a matrix with a.shape[0] rows; the result has the
    same shape as b.
    """
    a = as_matrix(a, "a")
    b_arr = np.ascontiguousarray(b, dtype=np.float64)
    if b_arr.ndim not in (1, 2):
        raise ValueError(f"b must be 1-D or 2-D, got ndim={b_arr.ndim}")
    if b_arr.shape[0] != a.shape[0]:
        raise ValueError(f"shape mismatch: a is {a.shape}, b has {b_arr.shape[0]} rows")
    lower = cholesky(a)
    x = cho_solve((lower, True), b_arr, check_finite=False)
    return require_finite(x, "solve_spd result")
