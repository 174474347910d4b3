"""Predictive mixtures at new inputs and the NLPP / RMSE metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .elbo import LayerNoise, LayerSampleState, last_layer, propagate_layer, tilted_last_layer
from .errors import DimensionMismatch, UntrainedModel
from .gaussian import LOG_2PI
from .model import layer_views, parameter_vector

CHUNK = 2000


@dataclass
class PredictiveMixture:
    """Equal-weight Gaussian mixture per test point, in standardized output units.

    ``means`` and ``variances`` are (P, T) and describe the latent function;
    ``noise_var`` is the final-layer observation noise.
    """

    means: np.ndarray
    variances: np.ndarray
    noise_var: float

    def __len__(self):
        return self.means.shape[0]

    @property
    def t_samples(self):
        return self.means.shape[1]

    def point_mean(self):
        return self.means.mean(axis=1)


def predict(model, x_star, t_samples=50, seed=0, check_trained=True, standardized=False):
    """Mixture over ``t_samples`` draws of the hidden layers at inputs ``x_star``.

    Inputs are in original units and pass through the model's stored
    standardization unless ``standardized`` is set. A one-layer model has no
    hidden draws and yields a single exact component per point.
    """
    if check_trained and model.iterations_trained == 0:
        raise UntrainedModel("model has not been trained")
    x_star = np.asarray(x_star, dtype=float)
    if x_star.ndim == 1:
        x_star = x_star.reshape(-1, model.architecture.input_dim) if x_star.size else \
            np.zeros((0, model.architecture.input_dim))
    if x_star.shape[1] != model.architecture.input_dim:
        raise DimensionMismatch(
            f"model expects {model.architecture.input_dim} features, got {x_star.shape[1]}")
    if not standardized and model.standardization is not None:
        x_star = model.standardization.transform_x(x_star)
    views = layer_views(model, parameter_vector(model))
    policy = model.config.jitter
    noise_var = float(np.exp(model.layers[-1].log_noise_var))
    n_hidden = model.n_layers - 1
    t = t_samples if n_hidden else 1
    p = x_star.shape[0]
    if p == 0:
        return PredictiveMixture(np.zeros((0, t)), np.zeros((0, t)), noise_var)

    rng = np.random.default_rng(seed)
    m = model.subset_size
    # subset draws are shared by every test point within a sample index
    shared = [(rng.standard_normal((t, layer.width, m)), rng.standard_normal((t, m, layer.width)))
              for layer in model.layers[:-1]]
    tilted = tilted_last_layer(views[-1], model.y_subset, policy)
    means, variances = [], []
    for lo in range(0, p, CHUNK):
        xb = x_star[lo: lo + CHUNK]
        state = LayerSampleState(model.x_subset, xb)
        for view, (eps_f, eps_zs), layer in zip(views[:-1], shared, model.layers[:-1]):
            noise = LayerNoise(eps_f, rng.standard_normal((t, xb.shape[0], layer.width)),
                               eps_zs, rng.standard_normal((t, xb.shape[0], layer.width)))
            state, _ = propagate_layer(state, view, noise, policy)
        _, mean, var = last_layer(views[-1], tilted, state.z_s, state.z_batch, policy)
        mean = np.atleast_2d(mean)
        var = np.atleast_2d(var)
        means.append(mean.T)
        variances.append(var.T)
    return PredictiveMixture(np.concatenate(means), np.concatenate(variances), noise_var)


def _check(mixture, y_true):
    y_true = np.asarray(y_true, dtype=float).reshape(-1)
    if y_true.shape[0] != len(mixture):
        raise DimensionMismatch(f"{len(mixture)} predictions but {y_true.shape[0]} targets")
    return y_true


def log_predictive(mixture, y_true, y_scale=1.0, y_mean=0.0):
    """Per-point log predictive density of original-unit targets."""
    y_true = _check(mixture, y_true)
    y_std = (y_true - y_mean) / y_scale
    var = mixture.variances + mixture.noise_var
    comp = -0.5 * (LOG_2PI + np.log(var) + (y_std[:, None] - mixture.means) ** 2 / var)
    return logsumexp(comp, axis=1) - np.log(mixture.t_samples) - np.log(y_scale)


def nlpp(mixture, y_true, y_scale=1.0, y_mean=0.0):
    """Mean negative log predictive probability, observation noise included."""
    if len(mixture) == 0:
        return float("nan")
    return float(-np.mean(log_predictive(mixture, y_true, y_scale, y_mean)))


def rmse(mixture, y_true, y_scale=1.0, y_mean=0.0):
    """Root mean squared error of the mixture mean, in original units."""
    y_true = _check(mixture, y_true)
    if y_true.size == 0:
        return float("nan")
    pred = mixture.point_mean() * y_scale + y_mean
    return float(np.sqrt(np.mean((pred - y_true) ** 2)))
