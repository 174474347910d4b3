"""Closed-form Gaussian building blocks: KL to a GP prior, the likelihood-tilted
update of the last layer, GP conditionals and reparameterised draws.

Every function accepts plain arrays or tape nodes (see :mod:`sodgp.autodiff`).
Covariances are always handled through square roots; nothing here forms an
explicit inverse.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from . import autodiff as ad
from .errors import DimensionMismatch
from .numerics import DEFAULT_JITTER, CholFactor

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class MvnNatural:
    """N(mean, L L^T) with ``cov_chol`` = L lower triangular. Leading dims batch."""

    mean: Any
    cov_chol: Any

    def __post_init__(self):
        if isinstance(self.cov_chol, CholFactor):
            self.cov_chol = self.cov_chol.lower
        m = np.shape(ad.value_of(self.mean))
        c = np.shape(ad.value_of(self.cov_chol))
        if len(c) < 2 or c[-1] != c[-2] or m[-1:] != c[-1:]:
            raise DimensionMismatch(f"mean {m} does not match covariance factor {c}")

    @property
    def n(self):
        return np.shape(ad.value_of(self.mean))[-1]

    def covariance(self):
        lower = ad.value_of(self.cov_chol)
        return lower @ np.swapaxes(lower, -1, -2)


@dataclass
class GpConditional:
    """Per-point conditional of GP values at new inputs given values at the subset.

    ``projector`` is K_new,S K_S,S^-1 and ``cond_var_diag`` the diagonal of
    K_new,new - K_new,S K_S,S^-1 K_S,new, clamped at zero.
    """

    projector: Any
    cond_var_diag: Any


def _lower(x):
    return x.lower if isinstance(x, CholFactor) else x


def _col(v):
    return ad.reshape(v, np.shape(ad.value_of(v)) + (1,))


def kl_to_gp_prior(q, prior_gram_chol, prior_mean=None):
    """KL(N(mu, Sigma) || N(prior_mean, K)) given the Cholesky factor of K.

    Batch dimensions of ``q`` and of the prior factor broadcast against each other.
    """
    lk = _lower(prior_gram_chol)
    lq = q.cov_chol
    n = q.n
    if np.shape(ad.value_of(lk))[-1] != n:
        raise DimensionMismatch("prior and variational dimensions differ")
    diff = q.mean if prior_mean is None else ad.subtract(q.mean, prior_mean)
    a = ad.solve_triangular(lk, lq)
    b = ad.solve_triangular(lk, _col(diff))
    trace_term = ad.sum(ad.square(a), axis=(-2, -1))
    maha = ad.sum(ad.square(b), axis=(-2, -1))
    logdet_k = ad.scalar_multiply(ad.sum(ad.log(ad.diagonal(lk)), axis=-1), 2.0)
    logdet_q = ad.scalar_multiply(ad.sum(ad.log(ad.diagonal(lq)), axis=-1), 2.0)
    inner = ad.add(ad.add(trace_term, maha), ad.subtract(logdet_k, logdet_q))
    return ad.scalar_multiply(ad.add(inner, -float(n)), 0.5)


def tilt_factors(q, noise_var, policy=DEFAULT_JITTER):
    """Square-root form of the tilted covariance: returns (R, Lb) with Sigma_hat = R R^T.

    Uses Sigma_hat = L (I + L^T L / s2)^-1 L^T, which never subtracts nearly
    equal matrices when the noise is small.
    """
    lq = q.cov_chol
    n = q.n
    inner = ad.add(np.eye(n), ad.divide(ad.matmul(ad.transpose(lq), lq), noise_var))
    lb = ad.cholesky(inner, policy)
    r_t = ad.solve_triangular(lb, ad.transpose(lq))
    return ad.transpose(r_t), lb


def exact_posterior_update(q_last, y_s, noise_var, policy=DEFAULT_JITTER):
    """q_hat(F_S) proportional to N(y_S; F_S, s2 I) q(F_S), returned as MvnNatural."""
    noise_var = noise_var if isinstance(noise_var, ad.Node) else np.asarray(noise_var, float)
    r, lb = tilt_factors(q_last, noise_var, policy)
    r_t = ad.transpose(r)
    lq_inv_mu = ad.solve_triangular(q_last.cov_chol, _col(q_last.mean))
    prior_part = ad.solve_triangular(lb, lq_inv_mu)
    data_part = ad.divide(ad.matmul(r_t, _col(y_s)), noise_var)
    mean = ad.matmul(r, ad.add(data_part, prior_part))
    mean = ad.reshape(mean, (q_last.n,))
    cov = ad.matmul(r, r_t)
    return MvnNatural(mean, ad.cholesky(cov, policy))


def gp_conditional(gram_s_chol, cross_sb_s, prior_diag_sb):
    """Projector and per-point conditional variance for new points given the subset."""
    lk = _lower(gram_s_chol)
    m = np.shape(ad.value_of(lk))[-1]
    if np.shape(ad.value_of(cross_sb_s))[-1] != m:
        raise DimensionMismatch("cross-covariance does not match subset size")
    w = ad.solve_triangular(lk, ad.transpose(cross_sb_s))
    projector = ad.transpose(ad.solve_triangular(lk, w, transpose=True))
    reduction = ad.sum(ad.square(w), axis=-2)
    cond_var = ad.maximum(ad.subtract(prior_diag_sb, reduction), 0.0)
    return GpConditional(projector, cond_var)


def reparam_sample(q, eps):
    """mean + L eps, with ``eps`` standard-normal noise supplied by the caller."""
    if np.shape(eps)[-1] != q.n:
        raise DimensionMismatch(f"noise has {np.shape(eps)[-1]} entries, expected {q.n}")
    return ad.add(q.mean, ad.einsum("...ij,...j->...i", q.cov_chol, eps))


def expected_gaussian_loglik(y, mean, var, noise_var):
    """E_{f ~ N(mean, var)} log N(y; f, noise_var)."""
    resid = ad.add(ad.square(ad.subtract(y, mean)), var)
    return ad.subtract(
        ad.scalar_multiply(ad.add(ad.log(noise_var), LOG_2PI), -0.5),
        ad.divide(resid, ad.scalar_multiply(noise_var, 2.0)),
    )
