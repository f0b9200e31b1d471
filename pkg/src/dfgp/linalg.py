"""Cholesky factorization with escalating jitter, triangular solves, log-determinants."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import NotPositiveDefiniteError, ShapeError, SingularError

# Multiples of the mean diagonal of A tried in order.
DEFAULT_JITTER_SCHEDULE = (0.0, 1e-8, 1e-6, 1e-4)


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower-triangular ``L`` with ``L @ L.T == A + jitter_applied * I``."""

    L: np.ndarray
    jitter_applied: float = 0.0

    @property
    def n(self) -> int:
        return self.L.shape[0]


def cholesky(A, jitter_schedule=DEFAULT_JITTER_SCHEDULE) -> CholeskyFactor:
    """Factor a symmetric matrix, boosting the diagonal until it succeeds.

    The schedule holds multiples of ``mean(diag(A))``; the first one that
    gives a factor with a strictly positive diagonal is used.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError(f"cholesky needs a square matrix, got {A.shape}")
    if not np.all(np.isfinite(A)):
        raise NotPositiveDefiniteError("matrix has non-finite entries")
    scale = max(np.abs(A).max(initial=0.0), 1.0)
    if np.abs(A - A.T).max(initial=0.0) > 1e-12 * scale:
        raise ShapeError("cholesky needs a symmetric matrix")

    n = A.shape[0]
    base = float(np.mean(np.diag(A))) if n else 0.0
    base = abs(base) if base != 0.0 else 1.0
    eye = np.eye(n)
    for rel in jitter_schedule:
        jitter = float(rel) * base
        try:
            L = np.linalg.cholesky(A + jitter * eye if jitter else A)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.diag(L) > 0.0) and np.all(np.isfinite(L)):
            return CholeskyFactor(L=L, jitter_applied=jitter)
    raise NotPositiveDefiniteError(
        f"matrix of size {n} is not positive definite after jitter {list(jitter_schedule)}"
    )


def triangular_solve(factor: CholeskyFactor | np.ndarray, b, transpose: bool = False) -> np.ndarray:
    """Solve ``L x = b`` (or ``L.T x = b`` when ``transpose``)."""
    L = factor.L if isinstance(factor, CholeskyFactor) else np.asarray(factor, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != L.shape[0]:
        raise ShapeError(f"triangular_solve: {L.shape} system with right-hand side {b.shape}")
    if np.any(np.diag(L) == 0.0):
        raise SingularError("triangular factor has a zero on its diagonal")
    return solve_triangular(L, b, lower=True, trans="T" if transpose else "N", check_finite=False)


def cho_solve(factor: CholeskyFactor, b) -> np.ndarray:
    """Solve ``(L L.T) x = b`` with two triangular solves."""
    return triangular_solve(factor, triangular_solve(factor, b), transpose=True)


def cho_inverse(factor: CholeskyFactor) -> np.ndarray:
    return cho_solve(factor, np.eye(factor.n))


def log_det(factor: CholeskyFactor) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(factor.L))))
