"""Subset-of-data variational inference for (deep) Gaussian process regression."""
