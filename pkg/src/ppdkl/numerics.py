"""Dense symmetric positive-definite linear algebra used by every GP path.

All covariance math in the package routes through :func:`cholesky_psd` and
:func:`solve_chol`; no module forms an explicit matrix inverse. Factorization
failures are retried with an escalating diagonal jitter before giving up.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

__all__ = [
    "CholFactor",
    "DimensionMismatch",
    "NotPositiveDefinite",
    "chol_logdet",
    "cholesky_psd",
    "limit_blas_threads",
    "solve_chol",
    "solve_lower",
    "solve_lower_t",
]


def limit_blas_threads(n: int = 1) -> None:
    """Cap BLAS thread pools.

    The dense problems here are small enough that OpenBLAS worker threads
    cost far more than they save (and oversubscribe when folds run in
    parallel processes), so the CLI and the evaluation harness pin this.
    """
    import threadpoolctl

    threadpoolctl.threadpool_limits(limits=n)


class NotPositiveDefinite(Exception):
    """Cholesky factorization failed even after the jitter escalation."""


class DimensionMismatch(ValueError):
    """Operand shapes do not conform."""


@dataclass(frozen=True)
class CholFactor:
    """Lower-triangular Cholesky factor plus the jitter that was needed.

    ``lower @ lower.T`` reconstructs the input matrix plus
    ``jitter_applied * I``.
    """

    lower: np.ndarray
    jitter_applied: float = 0.0

    @property
    def dim(self) -> int:
        return self.lower.shape[0]


def check_symmetric(M, tol: float = 1e-12) -> np.ndarray:
    """Validate that ``M`` is a finite, square, symmetric matrix.

    Symmetry is checked relative to the largest magnitude entry. Returns the
    validated float array.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix has non-finite entries")
    if M.size:
        scale = max(float(np.max(np.abs(M))), 1.0)
        if float(np.max(np.abs(M - M.T))) > tol * scale:
            raise ValueError("matrix is not symmetric")
    return M


def cholesky_psd(M, max_jitter_steps: int = 6) -> CholFactor:
    """Factor a (nearly) PSD matrix as L L^T, adding jitter if necessary.

    A plain factorization is attempted first. On failure the diagonal is
    inflated by ``1e-10 * mean(diag(M))``, escalating tenfold per retry for
    up to ``max_jitter_steps`` retries.

    Raises
    ------
    NotPositiveDefinite
        If every jittered attempt fails.
    """
    M = check_symmetric(M)
    n = M.shape[0]
    if n == 0:
        return CholFactor(lower=np.zeros((0, 0)))

    mean_diag = float(np.mean(np.diag(M)))
    base = 1e-10 * mean_diag if mean_diag > 0 else 1e-10
    jitter = 0.0
    for _ in range(max_jitter_steps + 1):
        try:
            target = M if jitter == 0.0 else M + jitter * np.eye(n)
            L = cholesky(target, lower=True)
        except np.linalg.LinAlgError:
            jitter = base if jitter == 0.0 else jitter * 10.0
            continue
        return CholFactor(lower=L, jitter_applied=jitter)
    raise NotPositiveDefinite(
        f"not positive definite after {max_jitter_steps} jitter steps "
        f"(last jitter {jitter / 10.0:.3e})"
    )


def solve_chol(L: CholFactor, B) -> np.ndarray:
    """Solve ``(L L^T) X = B`` for X given a Cholesky factor."""
    B = np.asarray(B, dtype=float)
    if B.shape[0] != L.dim:
        raise DimensionMismatch(
            f"factor is {L.dim}x{L.dim} but right-hand side has leading dim {B.shape[0]}"
        )
    if L.dim == 0:
        return np.zeros_like(B)
    return cho_solve((L.lower, True), B)


def solve_lower(L: CholFactor, B) -> np.ndarray:
    """Solve the triangular system ``L X = B``."""
    B = np.asarray(B, dtype=float)
    if B.shape[0] != L.dim:
        raise DimensionMismatch(
            f"factor is {L.dim}x{L.dim} but right-hand side has leading dim {B.shape[0]}"
        )
    if L.dim == 0:
        return np.zeros_like(B)
    return solve_triangular(L.lower, B, lower=True)


def solve_lower_t(L: CholFactor, B) -> np.ndarray:
    """Solve the triangular system ``L^T X = B``."""
    B = np.asarray(B, dtype=float)
    if B.shape[0] != L.dim:
        raise DimensionMismatch(
            f"factor is {L.dim}x{L.dim} but right-hand side has leading dim {B.shape[0]}"
        )
    if L.dim == 0:
        return np.zeros_like(B)
    return solve_triangular(L.lower, B, lower=True, trans="T")


def chol_logdet(L: CholFactor) -> float:
    """log det of the factored matrix, via ``2 * sum(log(diag(L)))``."""
    if L.dim == 0:
        return 0.0
    return 2.0 * float(np.sum(np.log(np.diag(L.lower))))
