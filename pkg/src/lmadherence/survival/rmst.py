from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ContractError, HorizonError
from .cox import Z95
from .km import KmCurve, km_estimate


def rmst(curve: KmCurve, tau: float) -> float:
    """Exact area under the KM step function on [0, tau]."""
    if tau <= 0:
        raise ContractError("tau must be positive")
    return _area(curve, tau)[0]


def _area(curve: KmCurve, tau: float):
    keep = curve.event_times < tau
    t = curve.event_times[keep]
    knots = np.concatenate([[0.0], t, [tau]])
    s = np.concatenate([[1.0], curve.survival[keep]])
    pieces = s * np.diff(knots)
    # area from each event time to tau, for the variance
    tail = np.flip(np.cumsum(np.flip(pieces[1:])))
    return float(pieces.sum()), t, tail, curve.at_risk[keep], curve.events[keep]


def rmst_variance(curve: KmCurve, tau: float) -> float:
    """sum over event times of A(t_i)^2 d_i / (n_i (n_i - d_i)), A the area from t_i to tau."""
    _, _, tail, n, d = _area(curve, tau)
    ok = n > d
    return float(np.sum(tail[ok] ** 2 * d[ok] / (n[ok] * (n[ok] - d[ok]))))


@dataclass
class RmstResult:
    tau: float
    rmst_a: float
    rmst_b: float
    se_a: float
    se_b: float

    @property
    def difference(self) -> float:
        return self.rmst_a - self.rmst_b

    @property
    def se(self) -> float:
        return math.sqrt(self.se_a**2 + self.se_b**2)

    @property
    def ci(self) -> tuple[float, float]:
        return self.difference - Z95 * self.se, self.difference + Z95 * self.se

    def to_dict(self) -> dict:
        lo, hi = self.ci
        return {"tau": self.tau, "rmst_a": self.rmst_a, "rmst_b": self.rmst_b,
                "difference": self.difference, "se": self.se, "ci_lower": lo, "ci_upper": hi}


def rmst_difference(time_a, event_a, time_b, event_b, tau: float, truncate: bool = False) -> RmstResult:
    """RMST(a) - RMST(b) up to ``tau`` with a normal-approximation 95% CI.

    A curve whose follow-up ends before ``tau`` is carried flat from its last
    value. If ``tau`` lies beyond both groups' follow-up a HorizonError is raised
    unless ``truncate`` is set, in which case the horizon becomes the longer of
    the two follow-ups.
    """
    if tau <= 0:
        raise ContractError("tau must be positive")
    ca, cb = km_estimate(time_a, event_a), km_estimate(time_b, event_b)
    reach = max(ca.last_time, cb.last_time)
    if tau > reach:
        if not truncate:
            raise HorizonError(
                f"tau = {tau} exceeds the follow-up of both groups (max {reach:.4g}); "
                "lower tau or request truncation explicitly"
            )
        tau = reach
    return RmstResult(tau, rmst(ca, tau), rmst(cb, tau),
                      math.sqrt(rmst_variance(ca, tau)), math.sqrt(rmst_variance(cb, tau)))
