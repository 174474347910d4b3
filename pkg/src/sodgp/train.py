"""Adam on the stochastic ELBO.

Randomness comes from one master seed split into independent streams for
initialisation, subset choice, batch order and reparameterisation noise, so a
run is reproducible from its seed alone.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .elbo import deep_elbo, draw_eps
from .errors import NumericalDivergence
from .model import parameter_vector, set_parameter_vector

STREAMS = ("init", "subset", "batch", "eps")

BREAKDOWN_FIELDS = ("loglik_sbar", "loglik_s", "kl_first_layer", "kl_intermediate",
                    "kl_last_layer")


def seed_streams(seed):
    """Independent generators for each named stream, all derived from ``seed``."""
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(child) for name, child in zip(STREAMS, children)}


def stream_seed(seed, name):
    """Integer seed for a stream, for APIs that take a seed rather than a generator."""
    return int(seed_streams(seed)[name].integers(2**63))


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 20000
    batch_size: int = 2000
    learning_rate: float = 0.01
    t_train: int = 10
    seed: int = 0
    log_every: int = 100
    clip_norm: float = 100.0

    def __post_init__(self):
        for name in ("iterations", "batch_size", "t_train", "log_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        # zero is allowed so that a run can be replayed without moving the parameters
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")


@dataclass
class TrainHistory:
    """Logged rows plus the ELBO of every iteration (before its update)."""

    iterations: list = field(default_factory=list)
    breakdowns: list = field(default_factory=list)   # dicts of floats, one per logged row
    wall_ms: list = field(default_factory=list)
    elbo_trace: Optional[np.ndarray] = None
    final_params: Optional[list] = None

    def rows(self):
        for it, bd, ms in zip(self.iterations, self.breakdowns, self.wall_ms):
            yield {"iteration": it, "elbo_total": bd["total"],
                   **{k: bd[k] for k in BREAKDOWN_FIELDS}, "wall_ms": ms}

    def smoothed(self, window=100):
        """Trailing moving average of the per-iteration ELBO."""
        trace = np.asarray(self.elbo_trace)
        csum = np.cumsum(np.insert(trace, 0, 0.0))
        out = np.empty_like(trace)
        for i in range(trace.size):
            lo = max(0, i + 1 - window)
            out[i] = (csum[i + 1] - csum[lo]) / (i + 1 - lo)
        return out


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update that *descends* ``grads``; returns (new_params, new_state)."""
    t = state.step + 1
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t)


class EpochSampler:
    """Minibatches from a fixed index set; each pass is a fresh permutation.

    Batches run straight across pass boundaries, so every index is visited
    once before any index is visited again.
    """

    def __init__(self, indices, batch_size, rng):
        self.indices = np.asarray(indices)
        self.batch_size = min(batch_size, self.indices.size)
        self.rng = rng
        self.queue = np.empty(0, dtype=self.indices.dtype)

    def next(self):
        while self.queue.size < self.batch_size:
            self.queue = np.concatenate([self.queue, self.rng.permutation(self.indices)])
        batch, self.queue = self.queue[: self.batch_size], self.queue[self.batch_size:]
        return batch


def elbo_and_grads(model, x_batch, y_batch, eps, n_sbar, params=None):
    """ELBO breakdown (floats) and its gradient for every parameter array."""
    tape = ad.Tape()
    leaves = [tape.parameter(p) for p in (parameter_vector(model) if params is None else params)]
    breakdown = deep_elbo(model, x_batch, y_batch, model.x_subset, model.y_subset, eps,
                          n_sbar, params=leaves)
    total = breakdown.total
    if not isinstance(total, ad.Node):
        return breakdown.as_floats(), [np.zeros_like(ad.value_of(p)) for p in leaves]
    grads = tape.backward(total)
    return breakdown.as_floats(), [grads[leaf.id] for leaf in leaves]


def _clip(grads, mask, max_norm):
    norm = np.sqrt(sum(float(np.sum(g * g)) for g, keep in zip(grads, mask) if keep))
    if norm > max_norm:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads


def train(model, x, y, cfg=TrainConfig(), progress: Optional[Callable] = None):
    """Maximise the ELBO in place; ``x``, ``y`` are the standardized training data.

    The subset stored on the model is kept fixed; minibatches are drawn from
    its complement.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    sbar = model.subset.sbar
    streams = seed_streams(cfg.seed)
    sampler = EpochSampler(sbar, cfg.batch_size, streams["batch"])
    eps_rng = streams["eps"]
    mask = model.trainable_mask()
    params = parameter_vector(model)
    state = AdamState.zeros_like(params)
    history = TrainHistory()
    trace = np.empty(cfg.iterations)
    start = time.perf_counter()
    for it in range(cfg.iterations):
        idx = sampler.next() if sbar.size else np.empty(0, dtype=np.int64)
        eps = draw_eps(eps_rng, model, idx.size, cfg.t_train)
        breakdown, grads = elbo_and_grads(model, x[idx], y[idx], eps, sbar.size, params)
        total = breakdown["total"]
        if not np.isfinite(total) or not all(np.all(np.isfinite(g)) for g in grads):
            raise NumericalDivergence(it)
        trace[it] = total
        if it % cfg.log_every == 0:
            ms = (time.perf_counter() - start) * 1000.0
            history.iterations.append(it)
            history.breakdowns.append(breakdown)
            history.wall_ms.append(ms)
            if progress is not None:
                progress(it, breakdown, ms)
        # ascend the bound: hand Adam the negated gradient
        grads = [-g if keep else np.zeros_like(g) for g, keep in zip(grads, mask)]
        grads = _clip(grads, mask, cfg.clip_norm)
        new_params, state = adam_step(params, grads, state, cfg.learning_rate)
        params = [p_new if keep else p_old
                  for p_new, p_old, keep in zip(new_params, params, mask)]
        if not all(np.all(np.isfinite(p)) for p in params):
            raise NumericalDivergence(it, f"parameters became non-finite at iteration {it}")
        set_parameter_vector(model, params)
    model.iterations_trained += cfg.iterations
    history.elbo_trace = trace
    history.final_params = parameter_vector(model)
    return history
