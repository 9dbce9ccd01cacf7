"""Shared symmetric-positive-definite factorization helpers with condition guards."""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

# Matrices with 2-norm condition numbers beyond this are treated as singular.
COND_LIMIT = 1e12


class SingularDesignError(RuntimeError):
    """A design matrix required to be invertible is numerically singular.

    Carries the offending matrix's name and its measured condition number so
    callers (and Monte Carlo error reports) can say exactly which Gram matrix
    collapsed.
    """

    def __init__(self, matrix_name: str, cond: float):
        self.matrix_name = matrix_name
        self.cond = float(cond)
        super().__init__(
            f"{matrix_name} is numerically singular "
            f"(condition number {self.cond:.3e} exceeds {COND_LIMIT:.0e})"
        )


def spd_cholesky(a: np.ndarray, name: str) -> np.ndarray:
    """Lower Cholesky factor of a symmetric matrix, guarded at COND_LIMIT.

    Raises SingularDesignError when the matrix is indefinite, non-finite, or
    has a 2-norm condition number above the guard.
    """
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise SingularDesignError(name, np.inf)
    cond = np.linalg.cond(a)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularDesignError(name, cond)
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        raise SingularDesignError(name, cond) from None


def spd_solve(a: np.ndarray, b: np.ndarray, name: str) -> np.ndarray:
    """Solve ``a @ x = b`` for symmetric positive definite ``a``."""
    lower = spd_cholesky(a, name)
    return cho_solve((lower, True), np.asarray(b, dtype=float))


def spd_inverse(a: np.ndarray, name: str) -> np.ndarray:
    """Inverse of a symmetric positive definite matrix via its Cholesky factor."""
    return spd_solve(a, np.eye(len(a)), name)


def whiten(lower: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Forward-substitute ``lower @ x = b`` (i.e. x = L^{-1} b)."""
    return solve_triangular(lower, b, lower=True)
