"""Squared-exponential covariance ``v * exp(-0.5 * sum_h (x_h - x'_h)^2 / l_h^2)``.

Hyperparameters are stored on the log scale. Inputs may carry leading batch
dimensions, e.g. one set of inputs per Monte-Carlo sample; hyperparameters
may be tape nodes. The covariance is a single fused tape primitive: it is
evaluated on (samples x batch x subset) blocks every step, and composing it
from elementwise nodes costs several full passes over those blocks.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import autodiff as ad
from .errors import DimensionMismatch

LOG_FLUSH = -600.0


@dataclass
class SqExpParams:
    log_variance: Any = field(default_factory=lambda: np.array(np.log(0.5)))
    log_lengthscales: Any = field(default_factory=lambda: np.array([np.log(0.5)]))

    @classmethod
    def from_values(cls, variance, lengthscales):
        return cls(np.array(np.log(variance), dtype=float),
                   np.log(np.atleast_1d(np.asarray(lengthscales, dtype=float))))

    @property
    def variance(self):
        return np.exp(ad.value_of(self.log_variance))

    @property
    def lengthscales(self):
        return np.exp(ad.value_of(self.log_lengthscales))

    @property
    def ard(self):
        return np.shape(ad.value_of(self.log_lengthscales))[-1] > 1


def _check_dims(params, x):
    n_ls = np.shape(ad.value_of(params.log_lengthscales))[-1]
    d = np.shape(ad.value_of(x))[-1]
    if n_ls != 1 and n_ls != d:
        raise DimensionMismatch(f"kernel has {n_ls} lengthscales but inputs have {d} columns")


def _sqexp_forward(log_variance, log_lengthscales, x1, x2, same=False):
    inv_ls = np.exp(-log_lengthscales)
    a = x1 * inv_ls
    b = x2 * inv_ls
    # in-place updates: these blocks are the largest arrays of a training step
    k = a @ np.swapaxes(b, -1, -2)
    k *= -2.0
    sa = (a * a).sum(-1)
    if same:
        # one symmetric addition keeps the gram exactly symmetric
        k += sa[..., :, None] + sa[..., None, :]
        idx = np.arange(k.shape[-1])
        k[..., idx, idx] = 0.0
    else:
        k += sa[..., :, None]
        k += (b * b).sum(-1)[..., None, :]
    np.maximum(k, 0.0, out=k)
    k *= -0.5
    k += log_variance
    # flush values below ~1e-261 to zero: subnormal floats stall the matrix products downstream
    k[k < LOG_FLUSH] = -np.inf
    np.exp(k, out=k)
    return k, (a, b, inv_ls)


def _sqexp_vjp(g, ctx, values, out, same=False):
    log_variance, log_lengthscales, x1, x2 = values
    a, b, inv_ls = ctx
    gd2 = g * out
    g_log_var = np.sum(gd2).reshape(np.shape(log_variance))
    gd2 *= -0.5
    if same:
        idx = np.arange(gd2.shape[-1])
        gd2[..., idx, idx] = 0.0
    ga = 2.0 * (a * gd2.sum(-1)[..., None] - gd2 @ b)
    gb = 2.0 * (b * gd2.sum(-2)[..., None] - np.swapaxes(gd2, -1, -2) @ a)
    g_ls = -(ga * a).reshape(-1, a.shape[-1]).sum(0) - (gb * b).reshape(-1, b.shape[-1]).sum(0)
    if np.size(log_lengthscales) == 1:
        g_ls = np.sum(g_ls)
    g_ls = np.reshape(g_ls, np.shape(log_lengthscales))
    gx1 = ad._unbroadcast(ga * inv_ls, x1.shape)
    gx2 = ad._unbroadcast(gb * inv_ls, x2.shape)
    return g_log_var, g_ls, gx1, gx2


ad.define_primitive("sqexp", _sqexp_forward, _sqexp_vjp)


def gram(params, x):
    """Covariance of ``x`` (..., N, D) with itself; diagonal equals the variance exactly."""
    _check_dims(params, x)
    return ad.apply("sqexp", params.log_variance, params.log_lengthscales, x, x, same=True)


def cross(params, x1, x2):
    """Cross-covariance between ``x1`` (..., A, D) and ``x2`` (..., B, D)."""
    _check_dims(params, x1)
    _check_dims(params, x2)
    if np.shape(ad.value_of(x1))[-1] != np.shape(ad.value_of(x2))[-1]:
        raise DimensionMismatch("cross: input column counts differ")
    return ad.apply("sqexp", params.log_variance, params.log_lengthscales, x1, x2)


def diag(params, x):
    """Prior variances k(x, x) for every row of ``x``; shape (..., N)."""
    shape = np.shape(ad.value_of(x))[:-1]
    return ad.multiply(ad.exp(params.log_variance), np.ones(shape))
