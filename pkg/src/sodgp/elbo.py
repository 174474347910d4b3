"""Evidence lower bound for subset-of-data DGPs.

The bound has five pieces: the expected log-likelihood of the minibatch
(rescaled to the whole complement of the subset), the expected log-likelihood
of the subset under the tilted last-layer posterior, and three KL terms for
the first, intermediate and last layers. The intermediate and last-layer KLs
depend on sampled subset inputs and are averaged over Monte-Carlo draws.

All T draws are carried through a layer at once: sampled tensors have a
leading sample axis, while layer-one inputs (the data itself) do not.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Any

import numpy as np

from . import autodiff as ad
from . import kernel as kern
from .gaussian import MvnNatural, expected_gaussian_loglik, tilt_factors
from .errors import DimensionMismatch
from .model import layer_views, parameter_vector


@dataclass
class ElboBreakdown:
    loglik_sbar: Any
    loglik_s: Any
    kl_first_layer: Any
    kl_intermediate: Any
    kl_last_layer: Any

    @property
    def total(self):
        pos = ad.add(self.loglik_sbar, self.loglik_s)
        neg = ad.add(ad.add(self.kl_first_layer, self.kl_intermediate), self.kl_last_layer)
        return ad.subtract(pos, neg)

    def as_floats(self):
        out = {f.name: float(ad.value_of(getattr(self, f.name))) for f in fields(self)}
        out["total"] = float(ad.value_of(self.total))
        return out


@dataclass
class LayerSampleState:
    """Sampled quantities after one layer; leading axis indexes MC draws.

    ``prior_chol`` is the Cholesky factor of the layer's kernel at the
    incoming subset inputs, reused by the layer's KL term.
    """

    z_s: Any
    z_batch: Any
    f_s: Any = None
    prior_chol: Any = None


@dataclass
class LayerNoise:
    f: np.ndarray        # (T, D, M) draws for F_S
    batch: np.ndarray    # (T, B, D) draws for the batch conditional
    z_s: np.ndarray      # (T, M, D) observation noise at the subset
    z_batch: np.ndarray  # (T, B, D) observation noise at the batch


@dataclass
class EpsBundle:
    """Standard-normal draws for every hidden layer; constants on the tape."""

    layers: list

    @property
    def t_samples(self):
        return self.layers[0].f.shape[0] if self.layers else 1


def draw_eps(rng, model, n_batch, t_samples):
    m = model.subset_size
    out = []
    for layer in model.layers[:-1]:
        d = layer.width
        out.append(LayerNoise(rng.standard_normal((t_samples, d, m)),
                              rng.standard_normal((t_samples, n_batch, d)),
                              rng.standard_normal((t_samples, m, d)),
                              rng.standard_normal((t_samples, n_batch, d))))
    return EpsBundle(out)


def _sum_last2(a):
    return ad.sum(ad.square(a), axis=(-2, -1))


def _logdet_chol(lower):
    return ad.scalar_multiply(ad.sum(ad.log(ad.diagonal(lower)), axis=-1), 2.0)


def whitened_conditional(view, z_s, z_b, policy):
    """Prior Cholesky L at the subset, its inverse, W = L^-1 K_S,B and conditional variances.

    The projector K_B,S K_S,S^-1 equals W^T L^-1, so projecting any subset
    vector v reduces to W^T (L^-1 v); the projector itself is never formed.
    L^-1 is formed once per draw so that every whitening is a batched matrix
    product rather than a loop of triangular solves.
    """
    lk = ad.cholesky(kern.gram(view.kernel, z_s), policy)
    linv = ad.tri_inverse(lk)
    if np.shape(ad.value_of(z_b))[-2] == 0:
        return lk, linv, None, None
    w = ad.matmul(linv, ad.transpose(kern.cross(view.kernel, z_b, z_s)))
    prior_diag = kern.diag(view.kernel, z_b)
    cond_var = ad.maximum(ad.subtract(prior_diag, ad.sum(ad.square(w), axis=-2)), 0.0)
    return lk, linv, w, cond_var


def _trace_inv(linv, sym):
    """tr(K^-1 S) = sum(K^-1 * S) for symmetric S, with K^-1 = L^-T L^-1."""
    k_inv = ad.matmul(ad.transpose(linv), linv)
    return ad.sum(ad.multiply(k_inv, sym), axis=(-2, -1))


def propagate_layer(state, view, eps, policy):
    """Push the subset and batch inputs of one hidden layer to noisy outputs.

    F_S is drawn from q(F_S), batch values from the GP conditional given that
    shared draw (independently per point), then observation noise is added.
    The layer's KL against the prior at the incoming subset inputs (summed over
    output dimensions, one value per draw) comes back as well.
    """
    d, m = np.shape(ad.value_of(view.q_mean))
    t = eps.f.shape[0]
    lk, linv, w, cond_var = whitened_conditional(view, state.z_s, state.z_batch, policy)

    mean_t = ad.transpose(view.q_mean)                                  # (M, D)
    spread = ad.matmul(view.q_chol, eps.f[..., None])                  # (T, D, M, 1)
    g_s = ad.add(mean_t, ad.transpose(ad.reshape(spread, (t, d, m)), (0, 2, 1)))  # (T, M, D)
    folded = ad.reshape(ad.transpose(view.q_chol, (1, 0, 2)), (m, d * m))
    cov_sum = ad.matmul(folded, ad.transpose(folded))                   # sum_d Sigma_d

    trace_term = _trace_inv(linv, cov_sum)
    maha = _sum_last2(ad.matmul(linv, mean_t))
    logdet_k = ad.scalar_multiply(_logdet_chol(lk), float(d))
    logdet_q = ad.sum(_logdet_chol(view.q_chol))
    inner = ad.add(ad.add(trace_term, maha), ad.subtract(logdet_k, logdet_q))
    kl = ad.scalar_multiply(ad.add(inner, -float(d * m)), 0.5)

    noise_sd = ad.sqrt(view.noise_var)
    f_s = g_s
    if view.mean_weights is not None:
        f_s = ad.add(f_s, ad.matmul(state.z_s, view.mean_weights))
    z_s = ad.add(f_s, ad.multiply(noise_sd, eps.z_s))
    if w is None:
        return LayerSampleState(z_s, np.zeros((t, 0, d)), f_s, lk), kl
    u = ad.matmul(linv, g_s)                                            # L^-1 g_s
    sd = ad.sqrt(cond_var)
    f_b = ad.add(ad.matmul(ad.transpose(w), u),
                 ad.multiply(ad.reshape(sd, np.shape(ad.value_of(sd)) + (1,)), eps.batch))
    if view.mean_weights is not None:
        f_b = ad.add(f_b, ad.matmul(state.z_batch, view.mean_weights))
    z_b = ad.add(f_b, ad.multiply(noise_sd, eps.z_batch))
    return LayerSampleState(z_s, z_b, f_s, lk), kl


@dataclass
class TiltedLast:
    """q_hat at the last layer in square-root form: covariance R R^T."""

    mean: Any
    root: Any
    logdet: Any
    noise_var: Any


def tilted_last_layer(view, y_s, policy):
    noise_var = view.noise_var
    q = MvnNatural(view.q_mean[0], view.q_chol[0])
    r, lb = tilt_factors(q, noise_var, policy)
    m = q.n
    lq_inv_mu = ad.solve_triangular(q.cov_chol, ad.reshape(q.mean, (m, 1)))
    prior_part = ad.solve_triangular(lb, lq_inv_mu)
    data_part = ad.divide(ad.matmul(ad.transpose(r), np.reshape(y_s, (m, 1))), noise_var)
    mean = ad.reshape(ad.matmul(r, ad.add(data_part, prior_part)), (m,))
    logdet = ad.subtract(_logdet_chol(q.cov_chol), _logdet_chol(lb))
    return TiltedLast(mean, r, logdet, noise_var)


def last_layer(view, tilted, z_s, z_b, policy):
    """KL(q_hat || prior at z_s) and per-point marginals of the last-layer function at z_b.

    Returns (kl, mean, var); mean and var are None when there are no batch points.
    """
    m = np.shape(ad.value_of(tilted.mean))[-1]
    lk, linv, w, cond_var = whitened_conditional(view, z_s, z_b, policy)
    c = ad.matmul(linv, ad.reshape(tilted.mean, (m, 1)))
    a = ad.matmul(linv, tilted.root)
    inner = ad.add(ad.add(_sum_last2(a), _sum_last2(c)),
                   ad.subtract(_logdet_chol(lk), tilted.logdet))
    kl = ad.scalar_multiply(ad.add(inner, -float(m)), 0.5)
    if w is None:
        return kl, None, None
    w_t = ad.transpose(w)
    mean = ad.sum(ad.matmul(w_t, c), axis=-1)
    spread = ad.sum(ad.square(ad.matmul(w_t, a)), axis=-1)
    return kl, mean, ad.add(cond_var, spread)


def _mean(a):
    shape = np.shape(ad.value_of(a))
    if not shape:
        return a
    return ad.scalar_multiply(ad.sum(a), 1.0 / float(np.prod(shape)))


def deep_elbo(model, x_batch, y_batch, x_s, y_s, eps, n_sbar, params=None):
    """Stochastic ELBO on one minibatch of the subset complement.

    ``params`` is the flat parameter list (arrays or tape nodes); it defaults
    to the model's current values. ``eps`` comes from :func:`draw_eps` with a
    batch size matching ``x_batch``.
    """
    if params is None:
        params = parameter_vector(model)
    views = layer_views(model, params)
    policy = model.config.jitter
    x_batch = np.asarray(x_batch, dtype=float).reshape(-1, np.shape(x_s)[-1])
    y_batch = np.asarray(y_batch, dtype=float).reshape(-1)
    n_batch = x_batch.shape[0]
    if y_batch.shape[0] != n_batch:
        raise DimensionMismatch("batch inputs and targets differ in length")
    if len(eps.layers) != len(views) - 1:
        raise DimensionMismatch("noise bundle does not match the number of hidden layers")

    state = LayerSampleState(np.asarray(x_s, dtype=float), x_batch)
    kl_first = 0.0
    kl_mid = 0.0
    for index, (view, noise) in enumerate(zip(views[:-1], eps.layers)):
        if noise.batch.shape[1] != n_batch:
            raise DimensionMismatch("noise bundle was drawn for a different batch size")
        state, kl = propagate_layer(state, view, noise, policy)
        if index == 0:
            kl_first = _mean(kl)
        else:
            kl_mid = ad.add(kl_mid, _mean(kl))

    last = views[-1]
    tilted = tilted_last_layer(last, y_s, policy)
    kl, mean, var = last_layer(last, tilted, state.z_s, state.z_batch, policy)
    kl_last = _mean(kl)

    sigma2_hat_diag = ad.sum(ad.square(tilted.root), axis=-1)
    loglik_s = ad.sum(expected_gaussian_loglik(np.asarray(y_s, float), tilted.mean,
                                               sigma2_hat_diag, tilted.noise_var))
    if n_batch == 0:
        loglik_sbar = 0.0
    else:
        ll = expected_gaussian_loglik(y_batch, mean, var, tilted.noise_var)
        t = int(np.prod(np.shape(ad.value_of(ll))[:-1]))
        loglik_sbar = ad.scalar_multiply(ad.sum(ll), float(n_sbar) / (n_batch * t))
    return ElboBreakdown(loglik_sbar, loglik_s, kl_first, kl_mid, kl_last)


def single_layer_elbo(model, x, y, subset=None, params=None):
    """Closed-form bound for a one-layer model using every complement point."""
    if model.n_layers != 1:
        raise DimensionMismatch("single_layer_elbo requires a one-layer model")
    subset = model.subset if subset is None else subset
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    return deep_elbo(model, x[subset.sbar], y[subset.sbar], x[subset.s], y[subset.s],
                     EpsBundle([]), len(subset.sbar), params)

