"""Model specification, parameter containers and the multinomial-logit links."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from ..errors import ContractError

DEFAULT_DRUGS = ("RAS", "BB", "MRA")
KNOWN_COVARIATES = ("age", "gender", "mcs")


class TransitionForm(str, Enum):
    UNRESTRICTED = "unrestricted"
    LOGIT = "logit"


@dataclass(frozen=True)
class ModelSpec:
    """Shape of a multivariate latent Markov model.

    ``UNRESTRICTED`` carries a free initial vector and one free transition
    matrix per occasion; ``LOGIT`` uses time-homogeneous reference-category
    logits for both, optionally with covariates.
    """

    k: int
    drugs: tuple[str, ...] = DEFAULT_DRUGS
    categories: tuple[int, ...] = (3, 3, 3)
    T: int = 12
    init_covariates: tuple[str, ...] = ()
    trans_covariates: tuple[str, ...] = ()
    transition_form: TransitionForm = TransitionForm.LOGIT

    def __post_init__(self):
        object.__setattr__(self, "drugs", tuple(self.drugs))
        object.__setattr__(self, "categories", tuple(int(c) for c in self.categories))
        object.__setattr__(self, "init_covariates", tuple(self.init_covariates))
        object.__setattr__(self, "trans_covariates", tuple(self.trans_covariates))
        object.__setattr__(self, "transition_form", TransitionForm(self.transition_form))
        if self.k < 1:
            raise ContractError(f"k must be >= 1, got {self.k}")
        if len(self.drugs) != len(self.categories):
            raise ContractError("one category count is required per drug")
        if any(c < 2 for c in self.categories):
            raise ContractError("every response needs at least 2 categories")
        if self.T < 1:
            raise ContractError("T must be >= 1")
        if self.transition_form is TransitionForm.UNRESTRICTED and (
            self.init_covariates or self.trans_covariates
        ):
            raise ContractError("the unrestricted form takes no covariates")

    @property
    def J(self) -> int:
        return len(self.drugs)

    @property
    def c_max(self) -> int:
        return max(self.categories)

    def with_k(self, k: int) -> "ModelSpec":
        return ModelSpec(
            k, self.drugs, self.categories, self.T, self.init_covariates,
            self.trans_covariates, self.transition_form,
        )

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "drugs": list(self.drugs),
            "categories": list(self.categories),
            "T": self.T,
            "init_covariates": list(self.init_covariates),
            "trans_covariates": list(self.trans_covariates),
            "transition_form": self.transition_form.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            k=int(d["k"]),
            drugs=tuple(d.get("drugs", DEFAULT_DRUGS)),
            categories=tuple(d.get("categories", (3,) * len(d.get("drugs", DEFAULT_DRUGS)))),
            T=int(d.get("T", 12)),
            init_covariates=tuple(d.get("init_covariates", ())),
            trans_covariates=tuple(d.get("trans_covariates", ())),
            transition_form=TransitionForm(d.get("transition_form", "logit")),
        )


@dataclass
class LmmParameters:
    """Parameter blocks.

    phi[j, y, u] is P(Y_j = y | U = u), padded with zeros beyond c_j.
    beta has shape (k-1, 1+p_init), state 1 being the reference.
    gamma has shape (k, k-1, 1+p_trans); row block ``ubar`` holds the logits of
    the k-1 destinations other than ``ubar`` in increasing order (persistence is
    the reference). The unrestricted form uses ``delta`` (k,) and ``tau``
    (T-1, k, k) instead.
    """

    phi: np.ndarray
    beta: np.ndarray | None = None
    gamma: np.ndarray | None = None
    delta: np.ndarray | None = None
    tau: np.ndarray | None = None

    @property
    def k(self) -> int:
        return self.phi.shape[2]

    def copy(self) -> "LmmParameters":
        def c(a):
            return None if a is None else np.array(a, dtype=float, copy=True)

        return LmmParameters(c(self.phi), c(self.beta), c(self.gamma), c(self.delta), c(self.tau))

    def validate(self, spec: ModelSpec, atol: float = 1e-8) -> None:
        k = spec.k
        if self.phi.shape != (spec.J, spec.c_max, k):
            raise ContractError(f"phi has shape {self.phi.shape}, expected {(spec.J, spec.c_max, k)}")
        if np.any(self.phi < -atol) or np.any(self.phi > 1 + atol):
            raise ContractError("phi entries must lie in [0, 1]")
        for j, c in enumerate(spec.categories):
            if np.any(self.phi[j, c:, :] != 0):
                raise ContractError(f"phi for drug {spec.drugs[j]} has mass beyond category {c - 1}")
            if not np.allclose(self.phi[j, :c, :].sum(axis=0), 1.0, atol=atol):
                raise ContractError(f"phi columns for drug {spec.drugs[j]} must sum to 1")
        if spec.transition_form is TransitionForm.LOGIT:
            p0, p1 = 1 + len(spec.init_covariates), 1 + len(spec.trans_covariates)
            if self.beta is None or self.beta.shape != (k - 1, p0):
                raise ContractError(f"beta must have shape {(k - 1, p0)}")
            if self.gamma is None or self.gamma.shape != (k, k - 1, p1):
                raise ContractError(f"gamma must have shape {(k, k - 1, p1)}")
            if not (np.all(np.isfinite(self.beta)) and np.all(np.isfinite(self.gamma))):
                raise ContractError("logit coefficients must be finite")
        else:
            if self.delta is None or self.delta.shape != (k,):
                raise ContractError(f"delta must have shape {(k,)}")
            if self.tau is None or self.tau.shape != (spec.T - 1, k, k):
                raise ContractError(f"tau must have shape {(spec.T - 1, k, k)}")
            if not np.isclose(self.delta.sum(), 1.0, atol=atol) or np.any(self.delta < -atol):
                raise ContractError("delta must be a probability vector")
            if np.any(self.tau < -atol) or not np.allclose(self.tau.sum(axis=2), 1.0, atol=atol):
                raise ContractError("tau rows must be probability vectors")

    def to_dict(self) -> dict:
        out = {"phi": self.phi.tolist()}
        for name in ("beta", "gamma", "delta", "tau"):
            val = getattr(self, name)
            if val is not None:
                out[name] = np.asarray(val).tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict, spec: ModelSpec | None = None) -> "LmmParameters":
        def arr(name):
            return None if d.get(name) is None else np.asarray(d[name], dtype=float)

        params = cls(arr("phi"), arr("beta"), arr("gamma"), arr("delta"), arr("tau"))
        if spec is not None:
            # (k-1, 0)-shaped blocks do not survive a JSON round trip
            if spec.transition_form is TransitionForm.LOGIT and spec.k == 1:
                params.beta = np.zeros((0, 1 + len(spec.init_covariates)))
                params.gamma = np.zeros((1, 0, 1 + len(spec.trans_covariates)))
            params.validate(spec)
        return params


# -- links -----------------------------------------------------------------


def _check_finite(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ContractError("covariates must be finite")
    return x


def initial_logits(beta: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Full (n, k) logit matrix, zero in the reference column 0."""
    X = np.atleast_2d(X)
    eta = np.zeros((X.shape[0], beta.shape[0] + 1))
    eta[:, 1:] = X @ beta.T
    return eta


def initial_probs(beta, x_init_row) -> np.ndarray:
    """Initial-state distribution for one covariate row.

    >>> initial_probs(np.zeros((3, 1)), [1.0])
    array([0.25, 0.25, 0.25, 0.25])
    """
    beta = np.asarray(beta, dtype=float).reshape(-1, np.size(x_init_row))
    x = _check_finite(x_init_row)
    return initial_probs_matrix(beta, x[None, :])[0]


def initial_probs_matrix(beta: np.ndarray, X: np.ndarray) -> np.ndarray:
    eta = initial_logits(beta, X)
    eta -= eta.max(axis=1, keepdims=True)
    e = np.exp(eta)
    return e / e.sum(axis=1, keepdims=True)


def full_gamma(gamma: np.ndarray) -> np.ndarray:
    """Expand (k, k-1, q) transition coefficients to (k, k, q) with zero diagonal."""
    k, _, q = gamma.shape
    out = np.zeros((k, k, q))
    for ub in range(k):
        others = [u for u in range(k) if u != ub]
        out[ub, others, :] = gamma[ub]
    return out


def compact_gamma(gamma_full: np.ndarray) -> np.ndarray:
    k, _, q = gamma_full.shape
    out = np.zeros((k, k - 1, q))
    for ub in range(k):
        others = [u for u in range(k) if u != ub]
        out[ub] = gamma_full[ub, others, :] - gamma_full[ub, ub, :]
    return out


def transition_row(gamma, from_state: int, x_trans_row) -> np.ndarray:
    """Transition probabilities out of ``from_state`` (0-based) for one row."""
    gamma = np.asarray(gamma, dtype=float)
    x = _check_finite(x_trans_row)
    if gamma.ndim != 3 or gamma.shape[2] != x.size:
        raise ContractError("gamma and covariate row dimensions disagree")
    if not 0 <= from_state < gamma.shape[0]:
        raise ContractError(f"from_state {from_state} out of range")
    eta = full_gamma(gamma)[from_state] @ x
    eta -= eta.max()
    e = np.exp(eta)
    return e / e.sum()


def transition_tensor(gamma: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Transition matrices for every design row: X (..., q) -> (..., k, k)."""
    G = full_gamma(gamma)
    eta = np.einsum("abq,...q->...ab", G, X)
    eta -= eta.max(axis=-1, keepdims=True)
    e = np.exp(eta)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(eta: np.ndarray, axis: int = -1) -> np.ndarray:
    return eta - logsumexp(eta, axis=axis, keepdims=True)


# -- counting and criteria ---------------------------------------------------


def count_free_params(spec: ModelSpec) -> int:
    k = spec.k
    g = k * sum(c - 1 for c in spec.categories)
    if spec.transition_form is TransitionForm.UNRESTRICTED:
        return g + (k - 1) + (spec.T - 1) * k * (k - 1)
    p0, p1 = len(spec.init_covariates), len(spec.trans_covariates)
    return g + (k - 1) * (1 + p0) + k * (k - 1) * (1 + p1)


def information_criteria(loglik: float, g: int, n: int) -> tuple[float, float]:
    """Return ``(aic, bic)``; ``n`` is the number of subjects."""
    if n < 1:
        raise ContractError("n must be >= 1")
    return -2.0 * loglik + 2.0 * g, -2.0 * loglik + g * math.log(n)


# -- canonical ordering ------------------------------------------------------


def adherence_score(phi: np.ndarray) -> np.ndarray:
    """Expected summed category per state, used as the canonical state key."""
    y = np.arange(phi.shape[1], dtype=float)
    return np.einsum("jyu,y->u", phi, y)


def permute_states(params: LmmParameters, order: Sequence[int]) -> LmmParameters:
    """Relabel states so that new state a is old state ``order[a]``."""
    order = np.asarray(order, dtype=int)
    out = LmmParameters(params.phi[:, :, order].copy())
    if params.beta is not None:
        q = params.beta.shape[1]
        full = np.vstack([np.zeros((1, q)), params.beta])[order]
        out.beta = (full - full[0])[1:]
    if params.gamma is not None:
        G = full_gamma(params.gamma)[np.ix_(order, order)]
        out.gamma = compact_gamma(G)
    if params.delta is not None:
        out.delta = params.delta[order].copy()
    if params.tau is not None:
        out.tau = params.tau[:, order][:, :, order].copy()
    return out


def canonical_order(params: LmmParameters) -> np.ndarray:
    return np.argsort(adherence_score(params.phi), kind="stable")


def canonicalize(params: LmmParameters) -> LmmParameters:
    return permute_states(params, canonical_order(params))


@dataclass
class Standardizer:
    """Affine map of non-intercept design columns to mean 0 / sd 1."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "Standardizer":
        X = X.reshape(-1, X.shape[-1])
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        mean[0], scale[0] = 0.0, 1.0
        const = scale < 1e-12
        mean[const], scale[const] = 0.0, 1.0
        return cls(mean, scale)

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.scale

    def to_raw(self, coef: np.ndarray) -> np.ndarray:
        """Coefficients on standardized columns -> coefficients on raw columns."""
        raw = coef / self.scale
        raw[..., 0] = coef[..., 0] - (coef[..., 1:] * self.mean[1:] / self.scale[1:]).sum(axis=-1)
        return raw

    def to_std(self, raw: np.ndarray) -> np.ndarray:
        coef = raw * self.scale
        coef[..., 0] = raw[..., 0] + (raw[..., 1:] * self.mean[1:]).sum(axis=-1)
        return coef


@dataclass
class FitResult:
    spec: ModelSpec
    params: LmmParameters
    loglik: float
    loglik_trace: list[float]
    n_iterations: int
    converged: bool
    g: int
    aic: float
    bic: float
    start_id: int
    n: int
    start_logliks: list[float] = field(default_factory=list)
