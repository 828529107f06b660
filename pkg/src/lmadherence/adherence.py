"""Monthly cumulative adherence levels from dispensing records.

Months are 30 days long, so the panel covers days 0-359. User status looks at
the whole first year (days 0-364).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .cohort import DRUGS, PatientRecord, PurchaseEvent
from .errors import ContractError

MONTH_DAYS = 30
N_MONTHS = 12
PANEL_DAYS = MONTH_DAYS * N_MONTHS
USER_WINDOW_DAYS = 365

LOW_CUT = Fraction(1, 4)
HIGH_CUT = Fraction(4, 5)


@dataclass(frozen=True)
class CoverageTimeline:
    drug: str
    covered_days: frozenset[int]

    def __len__(self):
        return len(self.covered_days)


def build_timeline(purchases: Sequence[PurchaseEvent], drug: str | None = None) -> CoverageTimeline:
    """Union of the supply windows of one patient's purchases of one drug.

    Overlapping supply is counted once and never carried forward.
    """
    purchases = list(purchases)
    if drug is None:
        drug = purchases[0].drug if purchases else ""
    if len({(p.patient_id, p.drug) for p in purchases}) > 1:
        raise ContractError("build_timeline expects purchases of one patient and one drug")
    days: set[int] = set()
    for p in purchases:
        days.update(range(max(p.dispense_day, 0), min(p.dispense_day + p.coverage_days, PANEL_DAYS)))
    return CoverageTimeline(drug, frozenset(days))


def cumulative_ratio(timeline: CoverageTimeline, t: int) -> Fraction:
    """Share of days 0 .. 30t-1 covered."""
    if not 1 <= t <= N_MONTHS:
        raise ContractError(f"month index must be in 1..{N_MONTHS}, got {t}")
    end = MONTH_DAYS * t
    return Fraction(sum(1 for d in timeline.covered_days if d < end), end)


def adherence_level(ratio) -> int:
    if not 0 <= ratio <= 1:
        raise ContractError(f"ratio must lie in [0, 1], got {ratio}")
    if ratio < LOW_CUT:
        return 0
    if ratio < HIGH_CUT:
        return 1
    return 2


def _all_ratios(timeline: CoverageTimeline) -> tuple[Fraction, ...]:
    covered = np.zeros(PANEL_DAYS, dtype=np.int64)
    covered[list(timeline.covered_days)] = 1
    upto = np.cumsum(covered.reshape(N_MONTHS, MONTH_DAYS).sum(axis=1))
    return tuple(Fraction(int(c), MONTH_DAYS * t) for t, c in enumerate(upto, start=1))


@dataclass
class DrugChannel:
    user: bool
    ratios: tuple[Fraction, ...]
    levels: tuple[int, ...] | None  # None for non-users


@dataclass
class AdherencePanel:
    patient_id: str
    channels: dict[str, DrugChannel]

    def levels(self, drug):
        return self.channels[drug].levels


def build_panel(patient: PatientRecord, purchases: Iterable[PurchaseEvent],
                drugs: Sequence[str] = DRUGS) -> AdherencePanel:
    purchases = list(purchases)
    for p in purchases:
        if p.patient_id != patient.patient_id:
            raise ContractError(f"purchase for {p.patient_id} passed with patient {patient.patient_id}")
    channels = {}
    for drug in drugs:
        mine = [p for p in purchases if p.drug == drug]
        user = any(0 <= p.dispense_day < USER_WINDOW_DAYS for p in mine)
        tl = build_timeline(mine, drug)
        ratios = _all_ratios(tl)
        levels = tuple(adherence_level(r) for r in ratios) if user else None
        channels[drug] = DrugChannel(user, ratios, levels)
    return AdherencePanel(patient.patient_id, channels)


def build_panels(patients: Sequence[PatientRecord], purchases: Iterable[PurchaseEvent],
                 drugs: Sequence[str] = DRUGS) -> list[AdherencePanel]:
    by_patient: dict[str, list[PurchaseEvent]] = {p.patient_id: [] for p in patients}
    for ev in purchases:
        if ev.patient_id in by_patient:
            by_patient[ev.patient_id].append(ev)
    return [build_panel(p, by_patient[p.patient_id], drugs) for p in patients]


def panel_arrays(panels: Sequence[AdherencePanel], drugs: Sequence[str] = DRUGS):
    """Stack panels into ``y`` (n, T, J) with -1 for non-users and ``mask`` (n, J)."""
    n, J = len(panels), len(drugs)
    y = np.full((n, N_MONTHS, J), -1, dtype=np.int64)
    mask = np.zeros((n, J), dtype=bool)
    for i, panel in enumerate(panels):
        for j, drug in enumerate(drugs):
            ch = panel.channels[drug]
            if ch.user:
                mask[i, j] = True
                y[i, :, j] = ch.levels
    return y, mask


def write_panel_csv(panels: Sequence[AdherencePanel], path, drugs: Sequence[str] = DRUGS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "drug", "user", "month", "ratio", "level"])
        for panel in panels:
            for drug in drugs:
                ch = panel.channels[drug]
                for t, r in enumerate(ch.ratios, start=1):
                    level = "" if ch.levels is None else ch.levels[t - 1]
                    w.writerow([panel.patient_id, drug, int(ch.user), t, repr(float(r)), level])
