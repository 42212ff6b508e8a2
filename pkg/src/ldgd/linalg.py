"""Stabilized Cholesky factorization, Gaussian KL divergences, and
reparameterized sampling.

Everything here goes through triangular factors; no explicit matrix inverses
are formed anywhere in the package.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover - declared dependency
    threadpool_limits = None

from .errors import DimensionMismatch, NotPositiveDefinite, ValidationError


@contextmanager
def single_thread_blas():
    """Pin BLAS to one thread for a code region.

    Every matrix in this package is small (at most a few hundred rows);
    multi-threaded BLAS spends far longer spinning on synchronization than
    computing, so the hot loops run inside this guard.
    """
    if threadpool_limits is None:
        yield
        return
    with threadpool_limits(limits=1):
        yield

#: Number of jittered attempts after the jitter-free one; each multiplies by 10.
JITTER_ATTEMPTS = 6


@dataclass
class CholeskyFactor:
    """Lower factor L with L @ L.T = input + jitter_used * I."""

    lower_triangular: np.ndarray
    jitter_used: float


def default_jitter(a: np.ndarray) -> float:
    """Base jitter: 1e-6 relative to the mean diagonal (floored for safety)."""
    diag_mean = float(np.mean(np.diag(a)))
    return 1e-6 * diag_mean if diag_mean > 0.0 else 1e-6


def jitter_sequence(a: np.ndarray, base_jitter: float | None = None) -> list[float]:
    base = default_jitter(a) if base_jitter is None else float(base_jitter)
    return [0.0] + [base * 10.0**i for i in range(JITTER_ATTEMPTS)]


def find_jitter(a: np.ndarray, base_jitter: float | None = None) -> float:
    """Smallest jitter from the ladder that makes ``a`` factorizable."""
    n = a.shape[0]
    eye = np.eye(n)
    last = 0.0
    for jitter in jitter_sequence(a, base_jitter):
        last = jitter
        try:
            np.linalg.cholesky(a + jitter * eye if jitter else a)
            return jitter
        except np.linalg.LinAlgError:
            continue
    raise NotPositiveDefinite(
        f"matrix is not positive definite even with jitter {last:g}",
        final_jitter=last,
    )


def chol_jitter(a, base_jitter: float | None = None) -> CholeskyFactor:
    """Cholesky factorization with an escalating jitter ladder.

    Tries jitter 0 first, then ``base_jitter`` (default: 1e-6 relative to the
    mean diagonal) escalating by 10x, up to six jittered attempts. Raises
    :class:`NotPositiveDefinite` carrying the final jitter tried.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError("matrix contains non-finite entries")
    asym = float(np.max(np.abs(a - a.T))) if a.size else 0.0
    if asym > 1e-10 * max(1.0, float(np.max(np.abs(a)))):
        raise ValidationError(f"matrix is not symmetric (max asymmetry {asym:g})")
    a = 0.5 * (a + a.T)
    jitter = find_jitter(a, base_jitter)
    lower = np.linalg.cholesky(a + jitter * np.eye(a.shape[0]) if jitter else a)
    return CholeskyFactor(lower_triangular=lower, jitter_used=jitter)


def kl_diag_standard(mu, scale) -> float:
    """KL(N(mu, diag(scale^2)) || N(0, I)) for diagonal Gaussians.

    Sum over coordinates of 1/2 (mu^2 + s^2 - 1 - ln s^2); zero exactly at
    mu = 0, s = 1.
    """
    mu = np.asarray(mu, dtype=float).ravel()
    scale = np.asarray(scale, dtype=float).ravel()
    if mu.shape[0] != scale.shape[0]:
        raise DimensionMismatch(
            f"mu has length {mu.shape[0]} but scale has length {scale.shape[0]}"
        )
    if np.any(scale <= 0.0):
        raise ValidationError("scale must be strictly positive")
    val = 0.5 * float(np.sum(mu * mu + scale * scale - 1.0 - 2.0 * np.log(scale)))
    return max(val, 0.0)


def kl_full_vs_prior(m, s, k_prior, base_jitter: float | None = None) -> float:
    """KL(N(m, S) || N(0, K_prior)) via Cholesky factors.

    1/2 (tr(K^-1 S) + m^T K^-1 m - M + ln det K - ln det S), with the trace
    and quadratic terms computed through triangular solves.
    """
    m = np.asarray(m, dtype=float).ravel()
    s = np.asarray(s, dtype=float)
    k_prior = np.asarray(k_prior, dtype=float)
    mm = m.shape[0]
    if s.shape != (mm, mm) or k_prior.shape != (mm, mm):
        raise DimensionMismatch(
            f"m has length {mm} but S has shape {s.shape} and K has shape {k_prior.shape}"
        )
    lk = chol_jitter(k_prior, base_jitter).lower_triangular
    ls = chol_jitter(s, base_jitter).lower_triangular
    w = solve_triangular(lk, ls, lower=True)
    trace = float(np.sum(w * w))
    alpha = solve_triangular(lk, m, lower=True)
    maha = float(np.sum(alpha * alpha))
    logdet_k = 2.0 * float(np.sum(np.log(np.diag(lk))))
    logdet_s = 2.0 * float(np.sum(np.log(np.diag(ls))))
    return max(0.5 * (trace + maha - mm + logdet_k - logdet_s), 0.0)


def reparam_sample(mu, scale, eps) -> np.ndarray:
    """Location-scale reparameterization: mu + scale * eps, elementwise."""
    mu = np.asarray(mu, dtype=float)
    scale = np.asarray(scale, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if not (mu.shape == scale.shape == eps.shape):
        raise DimensionMismatch(
            f"mu {mu.shape}, scale {scale.shape}, eps {eps.shape} must share a shape"
        )
    return mu + scale * eps
