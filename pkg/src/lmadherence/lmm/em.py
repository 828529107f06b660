"""EM estimation of the covariate-conditioned latent Markov model."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

from ..errors import ContractError, ZeroLikelihoodError
from .model import (
    FitResult,
    LmmParameters,
    ModelSpec,
    Standardizer,
    TransitionForm,
    canonicalize,
    count_free_params,
    information_criteria,
)
from .recursions import DataPanel, forward_backward_batch

log = logging.getLogger(__name__)

PHI_FLOOR = 1e-10


@dataclass
class EmOptions:
    max_iter: int = 500
    tol: float = 1e-8
    n_random_starts: int = 9
    seed: int = 0
    threads: int = 1


# -- weighted reference-category multinomial logit -----------------------------


def logit_objective(coef: np.ndarray, X: np.ndarray, counts: np.ndarray, ref: int) -> float:
    """sum_m sum_u counts[m, u] * log p_u(x_m) with ``ref`` as the zero-logit category."""
    eta = _full_eta(coef, X, ref)
    return float(np.sum(counts * (eta - logsumexp(eta, axis=1, keepdims=True))))


def _full_eta(coef, X, ref):
    k = coef.shape[0] + 1
    eta = np.zeros((X.shape[0], k))
    others = [u for u in range(k) if u != ref]
    eta[:, others] = X @ coef.T
    return eta


def fit_reference_logit(X, counts, ref, coef0, max_newton=25, rtol=1e-12):
    """Newton-Raphson with step halving; never returns a worse objective than ``coef0``."""
    n_rows, q = X.shape
    k = counts.shape[1]
    if k == 1:
        return coef0.copy()
    others = [u for u in range(k) if u != ref]
    w = counts.sum(axis=1)
    keep = w > 0
    X, counts, w = X[keep], counts[keep], w[keep]
    coef = coef0.copy()
    f = logit_objective(coef, X, counts, ref)
    d = (k - 1) * q
    for _ in range(max_newton):
        p = softmax(_full_eta(coef, X, ref), axis=1)[:, others]
        resid = counts[:, others] - w[:, None] * p
        grad = (resid.T @ X).ravel()
        # -Hessian: sum_m w_m (diag(p) - p p') (x) x x'
        wp = w[:, None] * p
        H = np.zeros((k - 1, q, k - 1, q))
        for a in range(k - 1):
            H[a, :, a, :] = (X * wp[:, a, None]).T @ X
        Z = (p[:, :, None] * X[:, None, :]).reshape(-1, d)
        H = H.reshape(d, d) - (Z * w[:, None]).T @ Z
        H += 1e-10 * (np.trace(H) / d + 1.0) * np.eye(d)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        step = step.reshape(k - 1, q)
        t = 1.0
        for _ in range(40):
            cand = coef + t * step
            f_new = logit_objective(cand, X, counts, ref)
            if f_new >= f:
                break
            t *= 0.5
        else:
            break
        improvement = f_new - f
        coef, f = cand, f_new
        if improvement <= rtol * (abs(f) + 1.0):
            break
    return coef


def constrained_multinomial(weights: np.ndarray, floor: float) -> np.ndarray:
    """Maximize sum_y w_y log p_y over the simplex subject to p_y >= floor."""
    c = weights.size
    if not weights.sum() > 0:
        return np.full(c, 1.0 / c)
    pinned = np.zeros(c, dtype=bool)
    while True:
        free_w = weights[~pinned].sum()
        p = np.full(c, floor)
        p[~pinned] = (1.0 - floor * pinned.sum()) * weights[~pinned] / free_w
        newly = (~pinned) & (p < floor)
        if not newly.any():
            return p
        pinned |= newly


def _collapse(inv, m, counts):
    """Sum the rows of ``counts`` that share a design row."""
    inv = np.ravel(inv)
    return np.column_stack([np.bincount(inv, counts[:, u], minlength=m) for u in range(counts.shape[1])])


# -- EM -------------------------------------------------------------------------


class _Problem:
    """Standardized design and cached arrays for one (spec, data) pair."""

    def __init__(self, spec: ModelSpec, data: DataPanel, threads: int):
        data.check(spec)
        self.spec, self.data, self.threads = spec, data, threads
        self.logit = spec.transition_form is TransitionForm.LOGIT
        x_init, x_trans = data.design(spec)
        self.std_init = Standardizer.fit(x_init)
        self.std_trans = Standardizer.fit(x_trans[:, 1:, :] if spec.T > 1 else x_trans)
        self.x_init = self.std_init.transform(x_init)
        self.x_trans = self.std_trans.transform(x_trans)
        J, c = spec.J, spec.c_max
        onehot = np.zeros(data.y.shape + (c,))
        np.put_along_axis(onehot, np.clip(data.y, 0, c - 1)[..., None], 1.0, axis=3)
        onehot *= data.mask[:, None, :, None]
        self.onehot = onehot  # (n, T, J, c)
        # the logit M-steps only need counts per distinct design row
        self.X_init_u, self.inv_init = np.unique(self.x_init, axis=0, return_inverse=True)
        rows = self.x_trans[:, 1:, :].reshape(-1, self.x_trans.shape[2])
        self.X_tr_u, self.inv_tr = np.unique(rows, axis=0, return_inverse=True)

    def estep(self, params):
        return forward_backward_batch(
            self.spec, params, self.data, self.threads, self.x_init, self.x_trans
        )

    def mstep(self, params: LmmParameters, post) -> LmmParameters:
        spec = self.spec
        k = spec.k
        new = params.copy()
        counts = np.einsum("ntjc,ntu->jcu", self.onehot, post.post)
        for j, cj in enumerate(spec.categories):
            for u in range(k):
                w = counts[j, :cj, u]
                if w.sum() > 0:
                    new.phi[j, :cj, u] = constrained_multinomial(w, PHI_FLOOR)
        if self.logit:
            cnt = _collapse(self.inv_init, len(self.X_init_u), post.post[:, 0, :])
            new.beta = fit_reference_logit(self.X_init_u, cnt, 0, params.beta)
            if spec.T > 1:
                for ub in range(k):
                    cnt = _collapse(self.inv_tr, len(self.X_tr_u), post.pair[:, :, ub, :].reshape(-1, k))
                    new.gamma[ub] = fit_reference_logit(self.X_tr_u, cnt, ub, params.gamma[ub])
        else:
            new.delta = post.post[:, 0, :].mean(axis=0)
            for t in range(spec.T - 1):
                num = post.pair[:, t].sum(axis=0)
                den = num.sum(axis=1)
                ok = den > 0
                new.tau[t, ok] = num[ok] / den[ok, None]
        return new

    # parameters live on the standardized scale inside the problem
    def to_raw(self, params: LmmParameters) -> LmmParameters:
        out = params.copy()
        if self.logit:
            out.beta = self.std_init.to_raw(params.beta)
            out.gamma = self.std_trans.to_raw(params.gamma)
        return out

    def to_std(self, params: LmmParameters) -> LmmParameters:
        out = params.copy()
        if self.logit:
            out.beta = self.std_init.to_std(params.beta)
            out.gamma = self.std_trans.to_std(params.gamma)
        return out


def deterministic_start(spec: ModelSpec, data: DataPanel) -> LmmParameters:
    """Marginal category frequencies tilted per state; zero logits."""
    k = spec.k
    phi = np.zeros((spec.J, spec.c_max, k))
    tilt = np.linspace(-1.0, 1.0, k) if k > 1 else np.zeros(1)
    for j, cj in enumerate(spec.categories):
        obs = data.y[data.mask[:, j], :, j].ravel()
        freq = np.bincount(obs, minlength=cj)[:cj].astype(float) + 1.0
        freq /= freq.sum()
        y = np.arange(cj) - (cj - 1) / 2.0
        for u in range(k):
            p = freq * np.exp(2.0 * tilt[u] * y)
            phi[j, :cj, u] = p / p.sum()
    return _latent_start(spec, phi, None)


def random_start(spec: ModelSpec, rng: np.random.Generator) -> LmmParameters:
    k = spec.k
    phi = np.zeros((spec.J, spec.c_max, k))
    for j, cj in enumerate(spec.categories):
        phi[j, :cj, :] = rng.dirichlet(np.ones(cj), size=k).T
    return _latent_start(spec, phi, rng)


def _latent_start(spec, phi, rng):
    k = spec.k

    def noise(shape):
        return np.zeros(shape) if rng is None else rng.normal(0.0, 0.1, size=shape)

    if spec.transition_form is TransitionForm.LOGIT:
        beta = noise((k - 1, 1 + len(spec.init_covariates)))
        gamma = noise((k, k - 1, 1 + len(spec.trans_covariates)))
        return LmmParameters(phi, beta=beta, gamma=gamma)
    delta = softmax(noise(k))
    tau = softmax(noise((spec.T - 1, k, k)), axis=2)
    return LmmParameters(phi, delta=delta, tau=tau)


def run_em(problem: _Problem, start: LmmParameters, max_iter: int, tol: float):
    """EM from one start (standardized scale). Returns params, loglik, trace, iterations, converged."""
    params = start
    post = problem.estep(params)
    ll = float(post.loglik.sum())
    trace = [ll]
    converged = False
    it = 0
    while it < max_iter:
        new = problem.mstep(params, post)
        new_post = problem.estep(new)
        new_ll = float(new_post.loglik.sum())
        it += 1
        params, post = new, new_post
        trace.append(new_ll)
        if abs(new_ll - ll) <= tol * abs(ll):
            converged = True
            ll = new_ll
            break
        ll = new_ll
    return params, ll, trace, it, converged


def em_fit(spec: ModelSpec, data: DataPanel, options: EmOptions | None = None,
           starts: list[LmmParameters] | None = None) -> FitResult:
    """Fit by EM from one deterministic and ``n_random_starts`` random starts.

    ``starts`` (raw-scale parameters) replaces the default initializations.
    The best run is relabelled into canonical state order.
    """
    options = options or EmOptions()
    if data.n == 0:
        raise ContractError("cannot fit an empty data panel")
    problem = _Problem(spec, data, options.threads)
    if starts is None:
        rng = np.random.default_rng(options.seed)
        starts = [deterministic_start(spec, data)] + [
            random_start(spec, rng) for _ in range(options.n_random_starts)
        ]
        std_starts = starts
    else:
        std_starts = [problem.to_std(s) for s in starts]

    best = None
    start_ll = []
    for sid, s in enumerate(std_starts):
        try:
            res = run_em(problem, s, options.max_iter, options.tol)
        except ZeroLikelihoodError as exc:
            log.warning("start %d abandoned: %s", sid, exc)
            start_ll.append(float("-inf"))
            continue
        start_ll.append(res[1])
        log.debug("start %d: loglik %.6f after %d iterations", sid, res[1], res[3])
        if best is None or res[1] > best[0][1]:
            best = (res, sid)
    if best is None:
        raise ZeroLikelihoodError(["all starts"])
    (params, ll, trace, it, converged), sid = best
    params = canonicalize(problem.to_raw(params))
    g = count_free_params(spec)
    aic, bic = information_criteria(ll, g, data.n)
    return FitResult(spec, params, ll, trace, it, converged, g, aic, bic, sid, data.n, start_ll)
