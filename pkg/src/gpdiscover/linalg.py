"""Dense linear algebra for GP likelihoods: guarded Cholesky and Gaussian
log-densities.

All factorizations go through :func:`chol_with_jitter`, which adds
``1e-8 * mean(diag)`` to the diagonal and escalates the jitter tenfold up
to three retries before giving up.  Every successful factorization adds
``n**3`` to a global integer counter, which cost-accounting tests and the
benchmark harness read via :func:`flop_total`.  Integer accumulation keeps
the counter exact and independent of thread interleaving.
"""

from __future__ import annotations

import math
import threading

import numpy as np
import scipy.linalg

__all__ = [
    "FactorizationError",
    "chol_with_jitter",
    "chol_logdet",
    "chol_solve",
    "mvn_logpdf_chol",
    "mvn_logpdf",
    "flop_total",
    "reset_flop_counter",
]

_LOG_2PI = math.log(2.0 * math.pi)

_flop_lock = threading.Lock()
_flop_total = 0


def flop_total() -> int:
    """Cumulative n^3 count over all Cholesky factorizations so far."""
    return _flop_total


def reset_flop_counter() -> None:
    global _flop_total
    with _flop_lock:
        _flop_total = 0


def _count(n: int) -> None:
    global _flop_total
    with _flop_lock:
        _flop_total += n**3


class FactorizationError(RuntimeError):
    """Covariance could not be factorized even after jitter escalation."""


def chol_with_jitter(cov: np.ndarray, jitter_scale: float = 1e-8, max_retries: int = 3) -> np.ndarray:
    """Lower Cholesky factor of ``cov + jitter * I``.

    The initial jitter is ``jitter_scale * mean(diag(cov))``; each retry
    multiplies it by 10.
    """
    n = cov.shape[0]
    jitter = jitter_scale * float(np.mean(np.diag(cov)))
    for attempt in range(max_retries + 1):
        try:
            shifted = cov if jitter == 0.0 else cov + (jitter * 10.0**attempt) * np.eye(n)
            lower = scipy.linalg.cholesky(shifted, lower=True, check_finite=False)
            _count(n)
            return lower
        except scipy.linalg.LinAlgError:
            continue
    raise FactorizationError(f"Cholesky failed after {max_retries} jitter escalations")


def chol_logdet(lower: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(lower))))


def chol_solve(lower: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve (L L^T) x = b given the lower factor."""
    y = scipy.linalg.solve_triangular(lower, b, lower=True, check_finite=False)
    return scipy.linalg.solve_triangular(lower.T, y, lower=False, check_finite=False)


def mvn_logpdf_chol(resid: np.ndarray, lower: np.ndarray) -> float:
    """Gaussian log-density of a residual given the covariance factor."""
    u = scipy.linalg.solve_triangular(lower, resid, lower=True, check_finite=False)
    n = resid.shape[0]
    return -0.5 * (n * _LOG_2PI + chol_logdet(lower) + float(u @ u))


def mvn_logpdf(y: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    """Exact multivariate-normal log-density via triangular factorization.

    Deterministic for fixed inputs; raises :class:`FactorizationError` if
    the covariance cannot be factorized after jitter escalation.
    """
    y = np.asarray(y, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    if y.shape != mean.shape or cov.shape != (y.size, y.size):
        raise ValueError("dimension mismatch in mvn_logpdf")
    if y.size == 0:
        return 0.0
    return mvn_logpdf_chol(y - mean, chol_with_jitter(cov))
