"""DGP model state: architecture, per-layer hyperparameters and variational
distributions over the function values at the fixed subset.

Everything trainable is stored unconstrained: variances and lengthscales on
the log scale, Cholesky diagonals through a softplus.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from . import autodiff as ad
from .errors import InvalidArchitecture
from .gaussian import MvnNatural
from .kernel import SqExpParams
from .numerics import DEFAULT_JITTER, JitterPolicy

INIT_KERNEL_VALUE = 0.5
INIT_NOISE_FINAL = 1e-2
INIT_NOISE_HIDDEN = 1e-5
INIT_COV_SCALE_HIDDEN = 1e-5


def softplus_inverse(x):
    x = np.asarray(x, dtype=float)
    # log(expm1(x)) loses precision for large x
    return np.where(x > 30.0, x, np.log(np.expm1(np.minimum(x, 30.0))))


def pack_tril(lower):
    n = lower.shape[-1]
    rows, cols = np.tril_indices(n)
    return lower[..., rows, cols]


@dataclass(frozen=True)
class Architecture:
    """``hidden_layers`` GP layers of equal width followed by one scalar output layer.

    A model called DGPx here has x hidden layers, i.e. x + 1 GP layers in total.
    """

    input_dim: int
    hidden_layers: int = 2
    hidden_width: Optional[int] = None

    def __post_init__(self):
        if self.input_dim < 1:
            raise InvalidArchitecture("input dimension must be positive")
        if self.hidden_layers < 0:
            raise InvalidArchitecture("hidden layer count cannot be negative")
        if self.hidden_width is not None and self.hidden_width < 1:
            raise InvalidArchitecture("hidden width must be positive")

    @property
    def width(self):
        return self.hidden_width if self.hidden_width is not None else min(30, self.input_dim)

    @property
    def n_layers(self):
        return self.hidden_layers + 1

    @property
    def widths(self):
        return [self.width] * self.hidden_layers + [1]

    @property
    def input_dims(self):
        return [self.input_dim] + self.widths[:-1]


@dataclass(frozen=True)
class ModelConfig:
    ard: bool = False
    train_hidden_noise: bool = True
    linear_mean: bool = False
    jitter: JitterPolicy = DEFAULT_JITTER


@dataclass
class LayerState:
    kernel: SqExpParams
    log_noise_var: np.ndarray
    q_mean: np.ndarray            # (D, M)
    q_tril: np.ndarray            # (D, M(M+1)/2), raw packed Cholesky, softplus diagonal
    mean_weights: Optional[np.ndarray] = None  # fixed (D_in, D) map when linear_mean is on

    @property
    def width(self):
        return self.q_mean.shape[0]

    @property
    def subset_size(self):
        return self.q_mean.shape[1]

    @property
    def noise_var(self):
        return float(np.exp(self.log_noise_var))

    def cov_chol(self):
        return _chol_from_packed(self.q_tril)

    def variational(self):
        lower = self.cov_chol()
        return [MvnNatural(self.q_mean[d], lower[d]) for d in range(self.width)]


@dataclass
class LayerView:
    """Parameters of one layer as tape nodes (or arrays when no tape is used)."""

    kernel: SqExpParams
    log_noise_var: Any
    q_mean: Any
    q_chol: Any
    mean_weights: Optional[np.ndarray] = None

    @property
    def noise_var(self):
        return ad.exp(self.log_noise_var)


def _chol_from_packed(packed):
    raw = ad.fill_tril(packed)
    n = np.shape(ad.value_of(raw))[-1]
    strict = np.tril(np.ones((n, n)), -1)
    return ad.add(ad.multiply(raw, strict), ad.diag_embed(ad.softplus(ad.diagonal(raw))))


@dataclass
class DgpModel:
    architecture: Architecture
    layers: list
    subset: Any
    standardization: Any
    x_subset: np.ndarray          # standardized inputs at the subset, (M, H)
    y_subset: np.ndarray          # standardized targets at the subset, (M,)
    config: ModelConfig = field(default_factory=ModelConfig)
    iterations_trained: int = 0

    @property
    def subset_size(self):
        return self.x_subset.shape[0]

    @property
    def n_layers(self):
        return len(self.layers)

    def parameter_count(self):
        return int(sum(p.size for p in parameter_vector(self)))

    def dsvi_parameter_count(self):
        """Count for the same model if every layer also learned M inducing inputs."""
        m = self.subset_size
        return self.parameter_count() + sum(m * d for d in self.architecture.input_dims)

    def views(self, tape=None):
        """Per-layer parameter views; registers every parameter on ``tape`` if given."""
        leaves = parameter_vector(self)
        if tape is not None:
            leaves = [tape.parameter(a) for a in leaves]
        return layer_views(self, leaves), leaves

    def trainable_mask(self):
        mask = []
        for index, layer in enumerate(self.layers):
            hidden = index < len(self.layers) - 1
            frozen_noise = hidden and not self.config.train_hidden_noise
            mask.extend([True, True, not frozen_noise, True, True])
        return mask

    def set_variational(self, layer, d, mean, cov):
        """Overwrite q(F_S,d) of one layer with the given moments."""
        lower = np.linalg.cholesky(np.asarray(cov, dtype=float))
        diag_idx = np.arange(lower.shape[0])
        raw = lower.copy()
        raw[diag_idx, diag_idx] = softplus_inverse(np.diagonal(lower))
        self.layers[layer].q_mean[d] = np.asarray(mean, dtype=float)
        self.layers[layer].q_tril[d] = pack_tril(raw)


def _layer_arrays(layer):
    return [layer.kernel.log_variance, layer.kernel.log_lengthscales,
            layer.log_noise_var, layer.q_mean, layer.q_tril]


def parameter_vector(model):
    """Unconstrained parameters, layer-major: log variance, log lengthscales,
    log noise variance, variational means, packed variational Cholesky."""
    return [np.array(a, dtype=float) for layer in model.layers for a in _layer_arrays(layer)]


def layer_views(model, params):
    """Build :class:`LayerView` objects from a flat parameter list (arrays or nodes)."""
    params = list(params)
    if len(params) != 5 * len(model.layers):
        raise ValueError("parameter list does not match model layout")
    views = []
    for i, layer in enumerate(model.layers):
        log_var, log_ls, log_noise, q_mean, q_tril = params[5 * i: 5 * i + 5]
        views.append(LayerView(SqExpParams(log_var, log_ls), log_noise, q_mean,
                               _chol_from_packed(q_tril), layer.mean_weights))
    return views


def set_parameter_vector(model, params):
    params = list(params)
    if len(params) != 5 * len(model.layers):
        raise ValueError("parameter list does not match model layout")
    for i, layer in enumerate(model.layers):
        chunk = [np.array(p, dtype=float) for p in params[5 * i: 5 * i + 5]]
        for old, new in zip(_layer_arrays(layer), chunk):
            if old.shape != new.shape:
                raise ValueError(f"shape mismatch {old.shape} vs {new.shape}")
        layer.kernel.log_variance, layer.kernel.log_lengthscales = chunk[0], chunk[1]
        layer.log_noise_var, layer.q_mean, layer.q_tril = chunk[2], chunk[3], chunk[4]


def closed_form_parameter_count(arch, m, ard=False):
    total = 0
    for d_in, d_out in zip(arch.input_dims, arch.widths):
        total += 1 + (d_in if ard else 1) + 1 + d_out * (m + m * (m + 1) // 2)
    return total


def _mean_weights(x, d_in, d_out, layer_index):
    if d_in == d_out:
        return np.eye(d_in)
    if layer_index == 0 and d_in > d_out:
        # project onto leading principal directions of the inputs
        _, _, vt = np.linalg.svd(x - x.mean(axis=0), full_matrices=False)
        return vt[:d_out].T.copy()
    w = np.zeros((d_in, d_out))
    k = min(d_in, d_out)
    w[:k, :k] = np.eye(k)
    return w


def init_model(arch, x, y, subset, seed=0, config=ModelConfig(), standardization=None):
    """Initialise a model on standardized training data ``x`` (N, H), ``y`` (N,)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    n, h = x.shape
    if h != arch.input_dim:
        raise InvalidArchitecture(f"architecture expects {arch.input_dim} inputs, data has {h}")
    m = len(subset.s)
    if m < 1 or m > n:
        raise InvalidArchitecture(f"subset size {m} must be in [1, {n}]")
    rng = np.random.default_rng(seed)
    layers = []
    n_layers = arch.n_layers
    for index, (d_in, d_out) in enumerate(zip(arch.input_dims, arch.widths)):
        final = index == n_layers - 1
        n_ls = d_in if config.ard else 1
        kernel = SqExpParams(np.array(np.log(INIT_KERNEL_VALUE)),
                             np.full(n_ls, np.log(INIT_KERNEL_VALUE)))
        noise = INIT_NOISE_FINAL if final else INIT_NOISE_HIDDEN
        cov_scale = 1.0 if final else INIT_COV_SCALE_HIDDEN
        q_mean = rng.standard_normal((d_out, m))
        raw = np.zeros((d_out, m, m))
        raw[:, np.arange(m), np.arange(m)] = softplus_inverse(np.sqrt(cov_scale))
        weights = None
        if config.linear_mean and not final:
            weights = _mean_weights(x, d_in, d_out, index)
        layers.append(LayerState(kernel, np.array(np.log(noise)), q_mean, pack_tril(raw), weights))
    return DgpModel(arch, layers, subset, standardization, x[subset.s].copy(),
                    y[subset.s].copy(), config)
