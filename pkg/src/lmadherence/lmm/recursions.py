"""Data panel, emission weights and scaled forward-backward recursions."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError, ZeroLikelihoodError
from .model import (
    LmmParameters,
    ModelSpec,
    TransitionForm,
    initial_probs_matrix,
    transition_tensor,
)

# Fixed chunking keeps reductions identical whatever the worker count.
CHUNK_SIZE = 1024


@dataclass
class DataPanel:
    """Responses and covariates for n subjects.

    y : (n, T, J) int, categories; entries of unobserved channels are ignored.
    mask : (n, J) bool, True where the subject is a user of drug j.
    covariates : name -> (n, T) float; time-fixed covariates are repeated.
    """

    y: np.ndarray
    mask: np.ndarray
    covariates: dict[str, np.ndarray] = field(default_factory=dict)
    ids: list[str] | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.y.ndim != 3:
            raise ContractError("y must be (n, T, J)")
        n, T, J = self.y.shape
        if self.mask.shape != (n, J):
            raise ContractError(f"mask must be (n, J) = {(n, J)}, got {self.mask.shape}")
        self.covariates = {
            name: np.asarray(v, dtype=float) for name, v in self.covariates.items()
        }
        for name, v in self.covariates.items():
            if v.shape != (n, T):
                raise ContractError(f"covariate {name!r} must be (n, T)")
        if self.ids is None:
            self.ids = [str(i) for i in range(n)]

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def T(self) -> int:
        return self.y.shape[1]

    def subset(self, idx) -> "DataPanel":
        idx = np.atleast_1d(np.asarray(idx))
        return DataPanel(
            self.y[idx], self.mask[idx],
            {k: v[idx] for k, v in self.covariates.items()},
            [self.ids[i] for i in idx],
        )

    def check(self, spec: ModelSpec) -> None:
        if self.n == 0:
            raise ContractError("empty data panel")
        if self.T != spec.T or self.y.shape[2] != spec.J:
            raise ContractError(
                f"data has T={self.T}, J={self.y.shape[2]}; model expects T={spec.T}, J={spec.J}"
            )
        for j, c in enumerate(spec.categories):
            obs = self.y[self.mask[:, j], :, j]
            if obs.size and (obs.min() < 0 or obs.max() >= c):
                raise ContractError(f"responses for {spec.drugs[j]} outside 0..{c - 1}")
        for name in set(spec.init_covariates) | set(spec.trans_covariates):
            if name not in self.covariates:
                raise ContractError(f"covariate {name!r} not present in data")

    def design(self, spec: ModelSpec) -> tuple[np.ndarray, np.ndarray]:
        """x_init (n, 1+p_init) from month 1; x_trans (n, T, 1+p_trans) using month t."""
        ones = np.ones((self.n, self.T, 1))
        x_trans = np.concatenate(
            [ones] + [self.covariates[c][:, :, None] for c in spec.trans_covariates], axis=2
        )
        x_init = np.concatenate(
            [ones] + [self.covariates[c][:, :, None] for c in spec.init_covariates], axis=2
        )[:, 0, :]
        return x_init, x_trans


def emission_weight(phi, y_row, mask, u: int) -> float:
    """Product of phi over the observed channels at one occasion."""
    phi = np.asarray(phi)
    w = 1.0
    for j, observed in enumerate(mask):
        if observed:
            w *= phi[j, int(y_row[j]), u]
    return float(w)


def emission_matrix(phi: np.ndarray, y: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """(n, T, k) emission weights; unobserved channels contribute 1."""
    n, T, J = y.shape
    B = np.ones((n, T, phi.shape[2]))
    for j in range(J):
        yj = np.where(mask[:, j, None], y[:, :, j], 0)
        pj = phi[j][yj]  # (n, T, k)
        B *= np.where(mask[:, j, None, None], pj, 1.0)
    return B


def log_emission_matrix(phi: np.ndarray, y: np.ndarray, mask: np.ndarray) -> np.ndarray:
    n, T, J = y.shape
    with np.errstate(divide="ignore"):
        logphi = np.log(phi)
    L = np.zeros((n, T, phi.shape[2]))
    for j in range(J):
        yj = np.where(mask[:, j, None], y[:, :, j], 0)
        L += np.where(mask[:, j, None, None], logphi[j][yj], 0.0)
    return L


def latent_probs(spec: ModelSpec, params: LmmParameters, data: DataPanel,
                 x_init=None, x_trans=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-subject initial (n, k) and transition (n, T-1, k, k) probabilities."""
    n, k, T = data.n, spec.k, spec.T
    if spec.transition_form is TransitionForm.UNRESTRICTED:
        delta = np.broadcast_to(params.delta, (n, k))
        tau = np.broadcast_to(params.tau, (n, T - 1, k, k))
        return delta, tau
    if x_init is None:
        x_init, x_trans = data.design(spec)
    delta = initial_probs_matrix(params.beta, x_init)
    tau = transition_tensor(params.gamma, x_trans[:, 1:, :])
    return delta, tau


@dataclass
class Posteriors:
    loglik: np.ndarray  # (n,)
    post: np.ndarray  # (n, T, k)
    pair: np.ndarray  # (n, T-1, k, k)


def _forward_backward_arrays(delta, tau, B, offset=0):
    n, T, k = B.shape
    alpha = np.empty((n, T, k))
    scale = np.empty((n, T))
    a = delta * B[:, 0]
    for t in range(T):
        if t > 0:
            a = np.matmul(alpha[:, t - 1, None, :], tau[:, t - 1])[:, 0, :] * B[:, t]
        c = a.sum(axis=1)
        bad = ~(c > 0)
        if bad.any():
            raise ZeroLikelihoodError((np.flatnonzero(bad) + offset).tolist())
        alpha[:, t] = a / c[:, None]
        scale[:, t] = c
    back = np.empty((n, T, k))
    back[:, T - 1] = 1.0
    for t in range(T - 2, -1, -1):
        w = B[:, t + 1] * back[:, t + 1]
        back[:, t] = np.matmul(tau[:, t], w[:, :, None])[:, :, 0] / scale[:, t + 1, None]
    post = alpha * back
    post /= post.sum(axis=2, keepdims=True)
    if T > 1:
        w = B[:, 1:] * back[:, 1:]  # (n, T-1, k)
        pair = alpha[:, :-1, :, None] * tau * (w / scale[:, 1:, None])[:, :, None, :]
        pair /= pair.sum(axis=(2, 3), keepdims=True)
    else:
        pair = np.zeros((n, 0, k, k))
    return np.log(scale).sum(axis=1), post, pair


def forward_backward_batch(spec: ModelSpec, params: LmmParameters, data: DataPanel,
                           threads: int = 1, x_init=None, x_trans=None) -> Posteriors:
    delta, tau = latent_probs(spec, params, data, x_init, x_trans)
    B = emission_matrix(params.phi, data.y, data.mask)
    starts = list(range(0, data.n, CHUNK_SIZE))

    def run(s):
        e = s + CHUNK_SIZE
        return _forward_backward_arrays(delta[s:e], tau[s:e], B[s:e], offset=s)

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    return Posteriors(
        np.concatenate([p[0] for p in parts]),
        np.concatenate([p[1] for p in parts]),
        np.concatenate([p[2] for p in parts]),
    )


def forward_backward(spec: ModelSpec, params: LmmParameters, data: DataPanel, i: int = 0):
    """Single-subject recursion.

    Returns ``(loglik, posteriors (T, k), pairwise posteriors (T-1, k, k))``.
    """
    res = forward_backward_batch(spec, params, data.subset([i]))
    return float(res.loglik[0]), res.post[0], res.pair[0]


def log_likelihood(spec: ModelSpec, params: LmmParameters, data: DataPanel, threads: int = 1) -> float:
    return float(forward_backward_batch(spec, params, data, threads).loglik.sum())
