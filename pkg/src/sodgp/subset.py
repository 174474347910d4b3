"""Choice of the fixed training subset whose function values act as inducing variables."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateData, InvalidSize


@dataclass(frozen=True)
class SubsetIndex:
    """Sorted subset indices ``s`` and their complement ``sbar`` in 0..N-1."""

    s: np.ndarray
    sbar: np.ndarray

    @classmethod
    def from_indices(cls, s, n):
        s = np.unique(np.asarray(s, dtype=np.int64))
        if s.size and (s[0] < 0 or s[-1] >= n):
            raise InvalidSize(f"subset index out of range for N={n}")
        mask = np.ones(n, dtype=bool)
        mask[s] = False
        return cls(s, np.flatnonzero(mask).astype(np.int64))

    @property
    def n(self):
        return self.s.size + self.sbar.size

    @property
    def m(self):
        return self.s.size


def default_subset_size(n):
    return 50 if n < 5000 else 100


def random_subset(n, m, seed):
    """Uniform draw of ``m`` indices out of ``n`` without replacement."""
    if not 1 <= m <= n:
        raise InvalidSize(f"subset size {m} must lie in [1, {n}]")
    rng = np.random.default_rng(seed)
    return SubsetIndex.from_indices(rng.choice(n, size=m, replace=False), n)


def _sq_dists(x, c):
    d2 = (x * x).sum(1)[:, None] + (c * c).sum(1)[None, :] - 2.0 * x @ c.T
    return np.maximum(d2, 0.0)


def _kmeans_pp(x, k, rng):
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = _sq_dists(x, centers[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = rng.choice(n, p=closest / total)
        else:
            idx = rng.integers(n)
        centers[j] = x[idx]
        closest = np.minimum(closest, _sq_dists(x, centers[j:j + 1])[:, 0])
    return centers


def kmeans(x, k, seed, max_iter=100):
    """Lloyd's algorithm with k-means++ seeding. Returns (centers, labels)."""
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, k, rng)
    labels = None
    for _ in range(max_iter):
        new_labels = np.argmin(_sq_dists(x, centers), axis=1)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        for j in range(k):
            if counts[j]:
                centers[j] = sums[j] / counts[j]
            else:
                # empty cluster: move it to the point farthest from where it was
                far = np.argmax(_sq_dists(x, centers[j:j + 1])[:, 0])
                centers[j] = x[far]
    return centers, np.argmin(_sq_dists(x, centers), axis=1)


def kmeans_subset(x, m, seed, max_iter=100):
    """Indices of the training points nearest to ``m`` K-means centroids.

    Centroids claim points in order; a centroid whose nearest point is taken
    falls back to its next-nearest unselected point.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    if not 1 <= m <= n:
        raise InvalidSize(f"subset size {m} must lie in [1, {n}]")
    if np.unique(x, axis=0).shape[0] < m:
        raise DegenerateData(f"fewer than {m} distinct rows")
    if m == n:
        return SubsetIndex.from_indices(np.arange(n), n)
    centers, _ = kmeans(x, m, seed, max_iter)
    d2 = _sq_dists(x, centers)
    taken = np.zeros(n, dtype=bool)
    chosen = []
    for j in range(m):
        for idx in np.argsort(d2[:, j], kind="stable"):
            if not taken[idx]:
                taken[idx] = True
                chosen.append(idx)
                break
    return SubsetIndex.from_indices(chosen, n)
