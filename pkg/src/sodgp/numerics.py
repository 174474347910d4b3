"""Dense linear algebra with a bounded jitter ladder.

All arrays are float64 numpy arrays. Batched variants accept leading batch
dimensions and are what the autodiff primitives call into.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular as _lapack_trsolve

from .errors import DimensionMismatch, NotPositiveDefinite

__all__ = [
    "JitterPolicy",
    "CholFactor",
    "cholesky",
    "solve_triangular",
    "logdet",
    "batched_cholesky",
    "batched_trsolve",
]


@dataclass(frozen=True)
class JitterPolicy:
    """Jitter levels tried in order, as multiples of the mean diagonal."""

    ladder: tuple[float, ...] = (0.0, 1e-8, 1e-6, 1e-4, 1e-2)

    def levels(self, a):
        scale = float(np.mean(np.diagonal(a)))
        if not scale > 0.0:
            scale = 1.0
        return [(factor * scale) for factor in self.ladder]


DEFAULT_JITTER = JitterPolicy()


@dataclass(frozen=True)
class CholFactor:
    lower: np.ndarray
    jitter_used: float = 0.0

    @property
    def n(self):
        return self.lower.shape[-1]


def _check_square(a):
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise DimensionMismatch(f"expected square matrix, got shape {a.shape}")


def _chol_single(a, policy):
    if not np.all(np.isfinite(a)):
        raise NotPositiveDefinite("matrix has non-finite entries")
    eye = np.eye(a.shape[-1])
    for jitter in policy.levels(a):
        try:
            return np.linalg.cholesky(a + jitter * eye if jitter else a), jitter
        except np.linalg.LinAlgError:
            continue
    raise NotPositiveDefinite(
        f"Cholesky failed at maximum jitter {policy.levels(a)[-1]:.3g}"
    )


def batched_cholesky(a, policy=DEFAULT_JITTER):
    """Lower Cholesky factors of the symmetric part of ``a`` (..., n, n).

    Returns ``(lower, jitter)`` where ``jitter`` has the batch shape.
    """
    a = np.asarray(a, dtype=float)
    _check_square(a)
    a = 0.5 * (a + np.swapaxes(a, -1, -2))
    batch = a.shape[:-2]
    if policy.ladder and policy.ladder[0] == 0.0 and np.all(np.isfinite(a)):
        try:
            return np.linalg.cholesky(a), np.zeros(batch)
        except np.linalg.LinAlgError:
            pass
    lower = np.empty_like(a)
    jitter = np.zeros(batch)
    for idx in np.ndindex(batch):
        lower[idx], jitter[idx] = _chol_single(a[idx], policy)
    return lower, jitter


def cholesky(a, jitter_policy=DEFAULT_JITTER):
    """Factor a symmetric positive definite matrix, escalating jitter on failure."""
    a = np.asarray(a, dtype=float)
    _check_square(a)
    if a.ndim != 2:
        raise DimensionMismatch("cholesky expects a single matrix; use batched_cholesky")
    scale = max(np.max(np.abs(a)), 1e-300)
    if np.max(np.abs(a - a.T)) > 1e-10 * scale:
        raise ValueError("matrix is not symmetric")
    lower, jitter = _chol_single(0.5 * (a + a.T), jitter_policy)
    return CholFactor(lower, float(jitter))


def batched_trsolve(l, b, transpose=False):
    """Solve ``L x = b`` (or ``L^T x = b``) for lower-triangular ``L``.

    ``l`` is (..., n, n) and ``b`` is (..., n, k); batch dimensions broadcast.
    """
    n = l.shape[-1]
    if b.shape[-2] != n:
        raise DimensionMismatch(f"triangular solve: {l.shape} vs {b.shape}")
    trans = 1 if transpose else 0
    if l.ndim == 2:
        if b.ndim == 2:
            return _lapack_trsolve(l, b, lower=True, trans=trans, check_finite=False)
        # fold the batch of right-hand sides into columns
        k = b.shape[-1]
        bb = np.moveaxis(b, -2, 0).reshape(n, -1)
        x = _lapack_trsolve(l, bb, lower=True, trans=trans, check_finite=False)
        return np.moveaxis(x.reshape((n,) + b.shape[:-2] + (k,)), 0, -2)
    batch = np.broadcast_shapes(l.shape[:-2], b.shape[:-2])
    lb = np.broadcast_to(l, batch + l.shape[-2:])
    bb = np.broadcast_to(b, batch + b.shape[-2:])
    out = np.empty(batch + b.shape[-2:])
    for idx in np.ndindex(batch):
        out[idx] = _lapack_trsolve(lb[idx], bb[idx], lower=True, trans=trans,
                                   check_finite=False)
    return out


def solve_triangular(l, b, transpose=False):
    """Solve with a :class:`CholFactor` (or raw lower matrix); ``b`` may be a vector."""
    lower = l.lower if isinstance(l, CholFactor) else np.asarray(l, dtype=float)
    b = np.asarray(b, dtype=float)
    if b.ndim == 0 or b.shape[0] != lower.shape[-1]:
        raise DimensionMismatch(f"cannot solve {lower.shape} system with rhs {b.shape}")
    if b.ndim == 1:
        return batched_trsolve(lower, b[:, None], transpose)[:, 0]
    return batched_trsolve(lower, b, transpose)


def logdet(l):
    """Log-determinant of ``L L^T``."""
    lower = l.lower if isinstance(l, CholFactor) else np.asarray(l)
    return 2.0 * float(np.sum(np.log(np.diagonal(lower, axis1=-2, axis2=-1))))
