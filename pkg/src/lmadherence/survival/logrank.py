from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaincc

from ..errors import ContractError


@dataclass
class LogrankResult:
    statistic: float
    df: int
    p_value: float
    groups: list
    observed: np.ndarray
    expected: np.ndarray


def chi2_sf(x: float, df: int) -> float:
    """Upper tail of the chi-square distribution via the regularized incomplete gamma."""
    if x <= 0:
        return 1.0
    return float(gammaincc(df / 2.0, x / 2.0))


def format_p(p: float) -> str:
    return "< 1e-300" if p < 1e-300 else repr(p)


def logrank_test(time, event, group, groups=None) -> LogrankResult:
    """G-group log-rank test.

    The statistic is the quadratic form of observed-minus-expected deaths in the
    generalized inverse of their hypergeometric covariance, with G-1 degrees of
    freedom.
    """
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=bool)
    group = np.asarray(group)
    if groups is None:
        groups = sorted(set(group.tolist()))
    groups = list(groups)
    if len(groups) < 2:
        raise ContractError("log-rank test needs at least two groups")
    member = np.stack([group == g for g in groups])  # (G, n)
    if np.any(member.sum(axis=1) == 0):
        empty = [g for g, m in zip(groups, member) if not m.any()]
        raise ContractError(f"groups with no subjects: {empty}")

    ev_times = np.unique(time[event])
    # n_gt: at risk in group g at event time t; d_gt: deaths
    n_gt = np.empty((len(groups), ev_times.size))
    d_gt = np.empty_like(n_gt)
    for gi in range(len(groups)):
        tg = np.sort(time[member[gi]])
        eg = np.sort(time[member[gi] & event])
        n_gt[gi] = tg.size - np.searchsorted(tg, ev_times, side="left")
        d_gt[gi] = np.searchsorted(eg, ev_times, side="right") - np.searchsorted(eg, ev_times, side="left")
    n_t = n_gt.sum(axis=0)
    d_t = d_gt.sum(axis=0)
    frac = n_gt / n_t
    expected = (frac * d_t).sum(axis=1)
    observed = d_gt.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        w = np.where(n_t > 1, d_t * (n_t - d_t) / (n_t - 1), 0.0)
    V = np.einsum("t,gt->g", w, frac)[:, None] * np.eye(len(groups)) - np.einsum("t,gt,ht->gh", w, frac, frac)
    diff = observed - expected
    stat = float(diff @ np.linalg.pinv(V) @ diff)
    stat = max(stat, 0.0)
    df = len(groups) - 1
    return LogrankResult(stat, df, chi2_sf(stat, df), groups, observed, expected)
