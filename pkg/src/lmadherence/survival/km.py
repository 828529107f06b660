from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from ..errors import ContractError


@dataclass
class SurvivalSample:
    """Right-censored times (years from the landmark) with group labels and covariates."""

    time: np.ndarray
    event: np.ndarray
    group: np.ndarray | None = None
    covariates: np.ndarray | None = None
    covariate_names: tuple[str, ...] = ()
    ids: list[str] | None = None

    def __post_init__(self):
        self.time = np.asarray(self.time, dtype=float)
        self.event = np.asarray(self.event, dtype=bool)
        if self.time.shape != self.event.shape or self.time.ndim != 1:
            raise ContractError("time and event must be 1-d arrays of equal length")
        if np.any(~(self.time > 0)):
            raise ContractError("survival times must be positive")
        if self.group is not None:
            self.group = np.asarray(self.group)

    def __len__(self):
        return self.time.size

    def subset(self, sel) -> "SurvivalSample":
        sel = np.asarray(sel)
        if sel.dtype == bool:
            sel = np.flatnonzero(sel)
        return SurvivalSample(
            self.time[sel], self.event[sel],
            None if self.group is None else self.group[sel],
            None if self.covariates is None else self.covariates[sel],
            self.covariate_names,
            None if self.ids is None else [self.ids[i] for i in sel],
        )


@dataclass
class KmCurve:
    """Product-limit estimate at the distinct event times."""

    event_times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray
    greenwood_var: np.ndarray
    last_time: float  # largest observed time, event or censored

    def __call__(self, t) -> np.ndarray:
        """Right-continuous step function S(t)."""
        idx = np.searchsorted(self.event_times, np.asarray(t, dtype=float), side="right")
        return np.concatenate([[1.0], self.survival])[idx]


def risk_table(time, event):
    """Distinct event times with numbers at risk and events; censorings at a tie stay at risk."""
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=bool)
    ev_times = np.unique(time[event])
    srt = np.sort(time)
    at_risk = srt.size - np.searchsorted(srt, ev_times, side="left")
    e = np.sort(time[event])
    d = np.searchsorted(e, ev_times, side="right") - np.searchsorted(e, ev_times, side="left")
    return ev_times, at_risk.astype(np.int64), d.astype(np.int64)


def km_estimate(time, event) -> KmCurve:
    time = np.asarray(time, dtype=float)
    if time.size == 0:
        raise ContractError("km_estimate needs at least one sample")
    ev_times, n, d = risk_table(time, event)
    surv = np.cumprod(1.0 - d / n)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(n > d, d / (n * (n - d)), 0.0)
    var = surv**2 * np.cumsum(terms)
    return KmCurve(ev_times, surv, n, d, var, float(time.max()))


def write_curves_csv(curves: dict[str, KmCurve], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "time", "survival", "at_risk", "events", "greenwood_var"])
        for g, c in curves.items():
            w.writerow([g, repr(0.0), repr(1.0), int(c.at_risk[0]) if c.at_risk.size else "", 0, repr(0.0)])
            for row in zip(c.event_times, c.survival, c.at_risk, c.events, c.greenwood_var):
                w.writerow([g, repr(float(row[0])), repr(float(row[1])), int(row[2]), int(row[3]),
                            repr(float(row[4]))])
