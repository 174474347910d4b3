"""Independent reference computations used by several test modules."""
import numpy as np
from scipy.stats import multivariate_normal

from sodgp.kernel import SqExpParams
from sodgp.model import Architecture, init_model
from sodgp.subset import SubsetIndex


def sqexp(x1, x2, variance, lengthscale):
    d2 = ((x1[:, None, :] - x2[None, :, :]) ** 2).sum(-1)
    return variance * np.exp(-0.5 * d2 / lengthscale ** 2)


def gp_log_evidence(x, y, variance, lengthscale, noise_var):
    k = sqexp(x, x, variance, lengthscale)
    return multivariate_normal(np.zeros(len(y)), k + noise_var * np.eye(len(y))).logpdf(y)


def gp_predictive(x, y, x_star, variance, lengthscale, noise_var):
    """Latent posterior mean and variance by dense solves."""
    k = sqexp(x, x, variance, lengthscale) + noise_var * np.eye(len(y))
    ks = sqexp(x_star, x, variance, lengthscale)
    mean = ks @ np.linalg.solve(k, y)
    var = variance - np.einsum("ij,ji->i", ks, np.linalg.solve(k, ks.T))
    return mean, var


def gp_instance(rng, n, max_cond=1e8):
    """Random 1-layer regression instance with a well-conditioned prior gram.

    Instances whose gram condition number exceeds ``max_cond`` are redrawn:
    setting q to the prior needs a Cholesky of K without jitter.
    """
    while True:
        h = int(rng.integers(1, 4))
        x = rng.uniform(-2.0, 2.0, size=(n, h))
        variance = rng.uniform(0.5, 2.0)
        lengthscale = rng.uniform(0.2, 0.6)
        noise_var = rng.uniform(0.05, 0.5)
        k = sqexp(x, x, variance, lengthscale)
        if np.linalg.cond(k) < max_cond:
            y = rng.multivariate_normal(np.zeros(n), k + noise_var * np.eye(n))
            return x, y, variance, lengthscale, noise_var


def one_layer_model(x, y, variance, lengthscale, noise_var, subset=None, seed=0):
    """L = 1 model with the given hyperparameters; q left at its default initialisation."""
    n, h = x.shape
    subset = SubsetIndex.from_indices(np.arange(n), n) if subset is None else subset
    model = init_model(Architecture(h, 0), x, y, subset, seed)
    layer = model.layers[0]
    layer.kernel = SqExpParams.from_values(variance, lengthscale)
    layer.log_noise_var = np.array(np.log(noise_var))
    return model


def set_q_to_prior(model, x_s, variance, lengthscale):
    k = sqexp(x_s, x_s, variance, lengthscale)
    model.set_variational(0, 0, np.zeros(len(x_s)), k)
    return k
