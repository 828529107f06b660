"""Draw latent paths and responses directly from a latent Markov model."""

from __future__ import annotations

import numpy as np

from .model import LmmParameters, ModelSpec
from .recursions import DataPanel, latent_probs


def _categorical(rng, p):
    """One draw per row of p (..., k)."""
    c = np.cumsum(p, axis=-1)
    u = rng.random(p.shape[:-1] + (1,))
    return np.minimum((u > c).sum(axis=-1), p.shape[-1] - 1)


def sample_panel(spec: ModelSpec, params: LmmParameters, covariates: dict[str, np.ndarray],
                 mask: np.ndarray, rng: np.random.Generator) -> tuple[DataPanel, np.ndarray]:
    """Sample responses for subjects with the given covariates and user mask.

    Returns the panel and the 1-based latent paths (n, T).
    """
    n = mask.shape[0]
    shell = DataPanel(np.zeros((n, spec.T, spec.J), dtype=np.int64), mask, covariates)
    delta, tau = latent_probs(spec, params, shell)
    paths = np.empty((n, spec.T), dtype=np.int64)
    paths[:, 0] = _categorical(rng, delta)
    rows = np.arange(n)
    for t in range(1, spec.T):
        paths[:, t] = _categorical(rng, tau[rows, t - 1, paths[:, t - 1]])
    y = np.zeros((n, spec.T, spec.J), dtype=np.int64)
    for j in range(spec.J):
        p = np.moveaxis(params.phi[j][:, paths], 0, -1)  # (n, T, c)
        y[:, :, j] = _categorical(rng, p)
    y = np.where(mask[:, None, :], y, -1)
    return DataPanel(y, mask, covariates), paths + 1
