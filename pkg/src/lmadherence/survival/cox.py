from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

from ..errors import ContractError, ConvergenceError, RankDeficiencyError

Z95 = 1.96


@dataclass
class CoxResult:
    names: list[str]
    coef: np.ndarray
    se: np.ndarray
    loglik: float
    loglik_null: float
    n_iter: int
    trace: list[float]

    @property
    def hazard_ratio(self) -> np.ndarray:
        return np.exp(self.coef)

    @property
    def ci(self) -> tuple[np.ndarray, np.ndarray]:
        return np.exp(self.coef - Z95 * self.se), np.exp(self.coef + Z95 * self.se)

    @property
    def p_values(self) -> np.ndarray:
        z = np.abs(self.coef / self.se)
        return erfc(z / math.sqrt(2.0))

    def table(self) -> list[dict]:
        lo, hi = self.ci
        return [
            {"term": n, "coef": float(b), "se": float(s), "hr": float(np.exp(b)),
             "ci_lower": float(a), "ci_upper": float(c), "p": float(p)}
            for n, b, s, a, c, p in zip(self.names, self.coef, self.se, lo, hi, self.p_values)
        ]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["term", "coef", "se", "hr", "ci_lower", "ci_upper", "p"])
            for row in self.table():
                w.writerow([row["term"]] + [repr(row[c]) for c in ("coef", "se", "hr", "ci_lower", "ci_upper", "p")])


class _RiskSets:
    """Sorted data and event-time groupings reused across Newton iterations."""

    def __init__(self, time, event, X):
        order = np.lexsort((~event, time))
        self.time, self.event, self.X = time[order], event[order], X[order]
        ev_rows = np.flatnonzero(self.event)
        ev_times, first = np.unique(self.time[ev_rows], return_index=True)
        self.ev_rows = ev_rows
        self.group_starts = first  # into ev_rows
        self.d = np.diff(np.append(first, ev_rows.size))
        self.risk_start = np.searchsorted(self.time, ev_times, side="left")
        self.x_death = np.add.reduceat(self.X[ev_rows], first, axis=0)


def _revcumsum(a):
    return np.flip(np.cumsum(np.flip(a, axis=0), axis=0), axis=0)


def partial_loglik(beta, rs: _RiskSets, ties: str = "efron", derivatives: bool = True):
    X = rs.X
    eta = X @ beta
    r = np.exp(eta)
    rx = r[:, None] * X
    S0 = _revcumsum(r)[rs.risk_start]
    S1 = _revcumsum(rx)[rs.risk_start]
    D0 = np.add.reduceat(r[rs.ev_rows], rs.group_starts)
    D1 = np.add.reduceat(rx[rs.ev_rows], rs.group_starts, axis=0)
    if derivatives:
        rxx = rx[:, :, None] * X[:, None, :]
        S2 = _revcumsum(rxx)[rs.risk_start]
        D2 = np.add.reduceat(rxx[rs.ev_rows], rs.group_starts, axis=0)
    ll = float(np.sum(rs.x_death @ beta))
    p = X.shape[1]
    grad = rs.x_death.sum(axis=0).astype(float)
    hess = np.zeros((p, p))
    for l in range(int(rs.d.max()) if rs.d.size else 0):
        act = rs.d > l
        f = (l / rs.d[act]) if ties == "efron" else np.zeros(act.sum())
        den = S0[act] - f * D0[act]
        ll -= float(np.sum(np.log(den)))
        if derivatives:
            num1 = S1[act] - f[:, None] * D1[act]
            num2 = S2[act] - f[:, None, None] * D2[act]
            e1 = num1 / den[:, None]
            grad -= e1.sum(axis=0)
            hess -= (num2 / den[:, None, None]).sum(axis=0) - e1.T @ e1
    if derivatives:
        return ll, grad, hess
    return ll


def _check_rank(X, names):
    Xc = X - X.mean(axis=0)
    scale = np.abs(Xc).max(axis=0)
    rank = 0
    for j in range(X.shape[1]):
        if scale[j] == 0:
            raise RankDeficiencyError(names[j])
        r = np.linalg.matrix_rank(Xc[:, : j + 1] / np.maximum(scale[: j + 1], 1e-300))
        if r <= rank:
            raise RankDeficiencyError(names[j])
        rank = r


def cox_fit(time, event, X, names=None, ties: str = "efron", max_iter: int = 50, tol: float = 1e-9) -> CoxResult:
    """Maximize the partial likelihood by Newton-Raphson with step halving.

    Standard errors come from the inverse observed information.
    """
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=bool)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    names = list(names) if names is not None else [f"x{j}" for j in range(p)]
    if ties not in ("efron", "breslow"):
        raise ContractError(f"unknown tie method {ties!r}")
    if time.shape != (n,) or event.shape != (n,):
        raise ContractError("time, event and X must have matching lengths")
    if not event.any():
        raise ContractError("Cox regression needs at least one event")
    _check_rank(X, names)
    Xc = X - X.mean(axis=0)
    rs = _RiskSets(time, event, Xc)
    beta = np.zeros(p)
    ll, grad, hess = partial_loglik(beta, rs, ties)
    ll_null = ll
    trace = [ll]
    for it in range(1, max_iter + 1):
        try:
            step = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError:
            raise ConvergenceError("singular information matrix", trace) from None
        t = 1.0
        for _ in range(30):
            cand = beta + t * step
            ll_new = partial_loglik(cand, rs, ties, derivatives=False)
            if np.isfinite(ll_new) and ll_new >= ll:
                break
            t *= 0.5
        else:
            cand, ll_new = beta, ll
        change = abs(ll_new - ll)
        beta = cand
        ll, grad, hess = partial_loglik(beta, rs, ties)
        trace.append(ll)
        if change <= tol * abs(ll) or change == 0.0:
            break
    else:
        raise ConvergenceError(f"Cox fit did not converge in {max_iter} iterations", trace)
    try:
        cov = np.linalg.inv(-hess)
    except np.linalg.LinAlgError:
        raise ConvergenceError("observed information is singular at the optimum", trace) from None
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return CoxResult(names, beta, se, ll, ll_null, it, trace)
