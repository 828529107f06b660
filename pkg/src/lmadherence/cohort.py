"""Cohort records, file ingestion and the synthetic-cohort simulator."""

from __future__ import annotations

import csv
import datetime as dt
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CohortFormatError, OrphanPurchaseError, ValidationError
from .lmm.model import LmmParameters, ModelSpec, TransitionForm, initial_probs_matrix, transition_tensor

DRUGS = ("RAS", "BB", "MRA")
T_MONTHS = 12
MONTH_DAYS = 30
FIRST_YEAR_DAYS = 365
DAYS_PER_YEAR = 365.25

PATIENT_COLUMNS = ["patient_id", "index_date", "age", "gender", "followup_days", "event"] + [
    f"mcs_{t}" for t in range(1, T_MONTHS + 1)
]
PURCHASE_COLUMNS = ["patient_id", "drug", "dispense_day", "coverage_days"]


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    index_date: dt.date
    age: int
    gender: str  # "M" or "F"
    mcs: tuple[int, ...]
    followup_days: int
    event: bool

    @property
    def female(self) -> int:
        return int(self.gender == "F")


@dataclass(frozen=True)
class PurchaseEvent:
    patient_id: str
    drug: str
    dispense_day: int
    coverage_days: int


# -- file ingestion ------------------------------------------------------------


def _open_table(path):
    fh = open(path, newline="")
    first = fh.readline()
    fh.seek(0)
    delim = "\t" if "\t" in first else ","
    return fh, csv.reader(fh, delimiter=delim)


def _header(path, reader, required):
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise CohortFormatError(path, 1, required[0], "file is empty") from None
    missing = [c for c in required if c not in header]
    if missing:
        raise CohortFormatError(path, 1, missing[0], "required column missing from header")
    return {name: header.index(name) for name in required}, len(header)


def _int_field(path, line, col, raw, lo=None):
    try:
        val = int(raw.strip())
    except ValueError:
        raise CohortFormatError(path, line, col, f"expected an integer, got {raw!r}") from None
    if lo is not None and val < lo:
        raise CohortFormatError(path, line, col, f"value {val} below minimum {lo}")
    return val


def read_patients(path) -> list[PatientRecord]:
    fh, reader = _open_table(path)
    with fh:
        cols, width = _header(path, reader, PATIENT_COLUMNS)
        out, seen = [], set()
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != width:
                raise CohortFormatError(path, line, "*", f"expected {width} fields, found {len(row)}")
            get = {c: row[i] for c, i in cols.items()}
            pid = get["patient_id"].strip()
            if not pid:
                raise CohortFormatError(path, line, "patient_id", "empty id")
            if pid in seen:
                raise CohortFormatError(path, line, "patient_id", f"duplicate id {pid!r}")
            seen.add(pid)
            try:
                index_date = dt.date.fromisoformat(get["index_date"].strip())
            except ValueError:
                raise CohortFormatError(path, line, "index_date", f"not an ISO date: {get['index_date']!r}") from None
            age = _int_field(path, line, "age", get["age"], lo=18)
            gender = get["gender"].strip().upper()
            if gender not in ("M", "F"):
                raise CohortFormatError(path, line, "gender", f"expected M or F, got {get['gender']!r}")
            followup = _int_field(path, line, "followup_days", get["followup_days"], lo=0)
            event = get["event"].strip()
            if event not in ("0", "1"):
                raise CohortFormatError(path, line, "event", f"expected 0 or 1, got {event!r}")
            mcs = tuple(_int_field(path, line, f"mcs_{t}", get[f"mcs_{t}"], lo=0) for t in range(1, T_MONTHS + 1))
            out.append(PatientRecord(pid, index_date, age, gender, mcs, followup, event == "1"))
    return out


def read_purchases(path) -> list[PurchaseEvent]:
    fh, reader = _open_table(path)
    with fh:
        cols, width = _header(path, reader, PURCHASE_COLUMNS)
        best: dict[tuple, PurchaseEvent] = {}
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != width:
                raise CohortFormatError(path, line, "*", f"expected {width} fields, found {len(row)}")
            get = {c: row[i] for c, i in cols.items()}
            pid = get["patient_id"].strip()
            drug = get["drug"].strip().upper()
            if drug not in DRUGS:
                raise CohortFormatError(path, line, "drug", f"unknown drug class {get['drug']!r}")
            day = _int_field(path, line, "dispense_day", get["dispense_day"], lo=0)
            cover = _int_field(path, line, "coverage_days", get["coverage_days"], lo=1)
            key = (pid, drug, day)
            if key not in best or best[key].coverage_days < cover:
                best[key] = PurchaseEvent(pid, drug, day, cover)
    return sorted(best.values(), key=lambda p: (p.patient_id, p.drug, p.dispense_day))


def load_cohort(patients_file, purchases_file) -> tuple[list[PatientRecord], list[PurchaseEvent]]:
    """Read both tables; duplicate purchases keep the largest supply."""
    patients = read_patients(patients_file)
    purchases = read_purchases(purchases_file)
    known = {p.patient_id for p in patients}
    orphans = {ev.patient_id for ev in purchases if ev.patient_id not in known}
    if orphans:
        raise OrphanPurchaseError(orphans)
    return patients, purchases


def write_patients(patients: Sequence[PatientRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PATIENT_COLUMNS)
        for p in patients:
            w.writerow([p.patient_id, p.index_date.isoformat(), p.age, p.gender, p.followup_days,
                        int(p.event), *p.mcs])


def write_purchases(purchases: Sequence[PurchaseEvent], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PURCHASE_COLUMNS)
        for ev in purchases:
            w.writerow([ev.patient_id, ev.drug, ev.dispense_day, ev.coverage_days])


def write_truth(patients: Sequence[PatientRecord], paths: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "t", "state"])
        for p, states in zip(patients, paths):
            for t, s in enumerate(states, start=1):
                w.writerow([p.patient_id, t, int(s)])


# -- cohort construction ---------------------------------------------------------


@dataclass
class CohortSelection:
    kept: list[PatientRecord]
    died_in_window: list[str] = field(default_factory=list)
    censored_without_purchase: list[str] = field(default_factory=list)


def select_cohort(patients: Sequence[PatientRecord], purchases: Sequence[PurchaseEvent]) -> CohortSelection:
    """Drop deaths inside the first year and first-year censorings with no purchase."""
    buyers = {ev.patient_id for ev in purchases if ev.dispense_day < FIRST_YEAR_DAYS}
    sel = CohortSelection([])
    for p in patients:
        if p.event and p.followup_days < FIRST_YEAR_DAYS:
            sel.died_in_window.append(p.patient_id)
        elif p.followup_days < FIRST_YEAR_DAYS and p.patient_id not in buyers:
            sel.censored_without_purchase.append(p.patient_id)
        else:
            sel.kept.append(p)
    return sel


def covariate_arrays(patients: Sequence[PatientRecord]) -> dict[str, np.ndarray]:
    """Covariates as (n, T) arrays; gender is coded F = 1, M = 0."""
    n = len(patients)
    age = np.array([p.age for p in patients], dtype=float)
    female = np.array([p.female for p in patients], dtype=float)
    mcs = np.array([p.mcs for p in patients], dtype=float).reshape(n, T_MONTHS)
    return {
        "age": np.repeat(age[:, None], T_MONTHS, axis=1),
        "gender": np.repeat(female[:, None], T_MONTHS, axis=1),
        "mcs": mcs,
    }


# -- simulator -------------------------------------------------------------------


@dataclass
class CovariateModel:
    age_mean: float = 78.0
    age_sd: float = 9.0
    age_min: int = 18
    age_max: int = 100
    p_female: float = 0.5
    mcs_mean: float = 4.0
    mcs_increase_prob: float = 0.05


@dataclass
class SurvivalModel:
    """Exponential hazard from the index date.

    The rate is ``baseline_hazard`` (per year) times the mean of
    ``state_hazard_multipliers`` over the months of the latent path, times
    exp(sum log_hr[c] * (x_c - reference[c])). Month-1 MCS is used.
    """

    baseline_hazard: float = 0.1
    state_hazard_multipliers: tuple[float, ...] = ()
    log_hr: dict = field(default_factory=dict)
    reference: dict = field(default_factory=dict)


@dataclass
class SyntheticCohortConfig:
    n_patients: int
    seed: int
    spec: ModelSpec
    true_params: LmmParameters
    covariate_model: CovariateModel = field(default_factory=CovariateModel)
    survival_model: SurvivalModel = field(default_factory=SurvivalModel)
    horizon_days: int = 3000
    user_prob: dict = field(default_factory=lambda: {"RAS": 0.85, "BB": 0.7, "MRA": 0.4})
    nested_refill_prob: float = 0.1

    def validate(self) -> None:
        if self.n_patients < 1:
            raise ValidationError(f"n_patients must be >= 1, got {self.n_patients}")
        if not 0 <= self.seed < 2**64:
            raise ValidationError("seed must be a 64-bit unsigned integer")
        if self.spec.T != T_MONTHS:
            raise ValidationError(f"simulation needs T = {T_MONTHS}")
        if tuple(self.spec.drugs) != DRUGS or any(c != 3 for c in self.spec.categories):
            raise ValidationError(f"simulation needs drugs {DRUGS} with 3 categories each")
        try:
            self.true_params.validate(self.spec)
        except ValueError as exc:
            raise ValidationError(f"invalid true parameters: {exc}") from exc
        mult = self.survival_model.state_hazard_multipliers
        if len(mult) != self.spec.k or any(m <= 0 for m in mult):
            raise ValidationError("need one positive hazard multiplier per latent state")
        if self.survival_model.baseline_hazard <= 0:
            raise ValidationError("baseline_hazard must be positive")
        if self.horizon_days < 1:
            raise ValidationError("horizon_days must be >= 1")
        for d in DRUGS:
            if not 0 <= self.user_prob.get(d, -1) <= 1:
                raise ValidationError(f"user_prob for {d} must be in [0, 1]")
        cm = self.covariate_model
        if not (18 <= cm.age_min <= cm.age_max) or cm.age_sd < 0 or not 0 <= cm.p_female <= 1:
            raise ValidationError("invalid covariate model")
        for c in self.survival_model.log_hr:
            if c not in ("age", "gender", "mcs"):
                raise ValidationError(f"unknown survival covariate {c!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticCohortConfig":
        try:
            spec = ModelSpec.from_dict(d["model"]["spec"])
            params = LmmParameters.from_dict(d["model"]["params"])
            surv = dict(d.get("survival", {}))
            surv["state_hazard_multipliers"] = tuple(surv.get("state_hazard_multipliers", ()))
            cfg = cls(
                n_patients=int(d["n_patients"]),
                seed=int(d["seed"]),
                spec=spec,
                true_params=params,
                covariate_model=CovariateModel(**d.get("covariates", {})),
                survival_model=SurvivalModel(**surv),
                horizon_days=int(d.get("censoring", {}).get("horizon_days", 3000)),
                user_prob=dict(d.get("adherence", {}).get("user_prob", {"RAS": 0.85, "BB": 0.7, "MRA": 0.4})),
                nested_refill_prob=float(d.get("adherence", {}).get("nested_refill_prob", 0.1)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed simulator config: {exc!r}") from exc
        return cfg


def load_simulation_config(path, **overrides) -> SyntheticCohortConfig:
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    d.update({k: v for k, v in overrides.items() if v is not None})
    return SyntheticCohortConfig.from_dict(d)


def band_bounds(level: int, t: int) -> tuple[int, int]:
    """Covered-day counts in days 0..30t-1 that give ``level`` at month t."""
    days = MONTH_DAYS * t
    if level == 0:
        return 0, (days - 1) // 4  # 4c < days
    if level == 1:
        return (days + 3) // 4, 24 * t - 1  # days/4 <= c < 0.8 days
    return 24 * t, days


@dataclass
class SimulatedPatient:
    record: PatientRecord
    purchases: list[PurchaseEvent]
    path: np.ndarray  # latent states 1..k
    levels: np.ndarray  # (T, J), -1 for non-users
    died_in_window: bool


@dataclass
class SimulatedCohort:
    patients: list[PatientRecord]
    purchases: list[PurchaseEvent]
    paths: np.ndarray  # (n, T), states 1..k
    levels: np.ndarray  # (n, T, J), -1 for non-users
    died_in_window: np.ndarray


def _sample_levels(rng, phi_j_path):
    """Draw a level sequence for one drug that some coverage pattern can realise.

    phi_j_path[t] is the level distribution at month t. A draw whose band cannot
    be reached from the earlier months is redrawn from the reachable levels.
    Returns levels and the cumulative covered-day counts.
    """
    lo, hi = 0, 0
    reach = []
    levels = np.empty(T_MONTHS, dtype=np.int64)
    for t in range(1, T_MONTHS + 1):
        r_lo, r_hi = lo, min(hi + MONTH_DAYS, MONTH_DAYS * t)
        feasible = np.zeros(3, dtype=bool)
        for y in range(3):
            b_lo, b_hi = band_bounds(y, t)
            feasible[y] = max(b_lo, r_lo) <= min(b_hi, r_hi)
        p = phi_j_path[t - 1] * feasible
        p = p / p.sum() if p.sum() > 0 else feasible / feasible.sum()
        y = int(rng.choice(3, p=p))
        b_lo, b_hi = band_bounds(y, t)
        lo, hi = max(b_lo, r_lo), min(b_hi, r_hi)
        levels[t - 1] = y
        reach.append((lo, hi))
    cum = np.empty(T_MONTHS, dtype=np.int64)
    c = int(rng.integers(reach[-1][0], reach[-1][1] + 1))
    cum[-1] = c
    for t in range(T_MONTHS - 2, -1, -1):
        a = max(reach[t][0], cum[t + 1] - MONTH_DAYS)
        b = min(reach[t][1], cum[t + 1])
        cum[t] = int(rng.integers(a, b + 1))
    return levels, cum


def _purchases_from_coverage(rng, pid, drug, cum, nested_prob):
    covered = np.zeros(T_MONTHS * MONTH_DAYS, dtype=bool)
    prev = 0
    for t in range(T_MONTHS):
        d = int(cum[t] - prev)
        prev = int(cum[t])
        if d:
            start = t * MONTH_DAYS + int(rng.integers(0, MONTH_DAYS - d + 1))
            covered[start:start + d] = True
    events = []
    edges = np.flatnonzero(np.diff(np.concatenate([[0], covered.astype(np.int8), [0]])))
    for s, e in zip(edges[::2], edges[1::2]):
        s, e = int(s), int(e)
        day = s
        while day < e:
            size = min(e - day, int(rng.integers(20, 31)))
            events.append(PurchaseEvent(pid, drug, day, size))
            if size > 2 and rng.random() < nested_prob:
                # refill inside an already covered window: no new days
                off = int(rng.integers(1, size))
                events.append(PurchaseEvent(pid, drug, day + off, int(rng.integers(1, size - off + 1))))
            day += size
    if not events:
        # user status needs a first-year purchase; keep it outside the panel window
        events.append(PurchaseEvent(pid, drug, T_MONTHS * MONTH_DAYS + int(rng.integers(0, 5)), 30))
    return events


def _simulate_one(cfg: SyntheticCohortConfig, i: int, seed_seq: np.random.SeedSequence) -> SimulatedPatient:
    rng = np.random.default_rng(seed_seq)
    spec, params, cm = cfg.spec, cfg.true_params, cfg.covariate_model
    k = spec.k
    pid = f"P{i + 1:06d}"

    age = int(np.clip(round(rng.normal(cm.age_mean, cm.age_sd)), cm.age_min, cm.age_max))
    gender = "F" if rng.random() < cm.p_female else "M"
    mcs0 = int(rng.poisson(cm.mcs_mean))
    mcs = np.cumsum(np.concatenate([[mcs0], rng.random(T_MONTHS - 1) < cm.mcs_increase_prob])).astype(int)
    cov = {"age": np.full(T_MONTHS, float(age)), "gender": np.full(T_MONTHS, float(gender == "F")),
           "mcs": mcs.astype(float)}

    if spec.transition_form is TransitionForm.UNRESTRICTED:
        delta, tau = params.delta, params.tau
    else:
        x_init = np.array([1.0] + [cov[c][0] for c in spec.init_covariates])
        x_trans = np.column_stack([np.ones(T_MONTHS)] + [cov[c] for c in spec.trans_covariates])
        delta = initial_probs_matrix(params.beta, x_init[None, :])[0]
        tau = transition_tensor(params.gamma, x_trans[1:])
    path = np.empty(T_MONTHS, dtype=np.int64)
    path[0] = rng.choice(k, p=delta)
    for t in range(1, T_MONTHS):
        path[t] = rng.choice(k, p=tau[t - 1, path[t - 1]])

    levels = np.full((T_MONTHS, len(DRUGS)), -1, dtype=np.int64)
    purchases: list[PurchaseEvent] = []
    for j, drug in enumerate(DRUGS):
        if rng.random() >= cfg.user_prob[drug]:
            continue
        lv, cum = _sample_levels(rng, params.phi[j][:, path].T)
        levels[:, j] = lv
        purchases.extend(_purchases_from_coverage(rng, pid, drug, cum, cfg.nested_refill_prob))

    sm = cfg.survival_model
    mult = float(np.mean(np.asarray(sm.state_hazard_multipliers)[path]))
    x_surv = {"age": age, "gender": float(gender == "F"), "mcs": float(mcs[0])}
    lp = sum(b * (x_surv[c] - sm.reference.get(c, 0.0)) for c, b in sm.log_hr.items())
    rate_per_day = sm.baseline_hazard * mult * np.exp(lp) / DAYS_PER_YEAR
    death_day = int(np.floor(rng.exponential(1.0 / rate_per_day)))
    event = death_day < cfg.horizon_days
    followup = death_day if event else cfg.horizon_days

    index_date = dt.date(2006, 1, 1) + dt.timedelta(days=int(rng.integers(0, 2557)))
    record = PatientRecord(pid, index_date, age, gender, tuple(int(m) for m in mcs), followup, bool(event))
    purchases.sort(key=lambda p: (p.drug, p.dispense_day))
    # dedup on (drug, day) like the loader so files round-trip
    dedup: dict[tuple, PurchaseEvent] = {}
    for ev in purchases:
        key = (ev.drug, ev.dispense_day)
        if key not in dedup or dedup[key].coverage_days < ev.coverage_days:
            dedup[key] = ev
    return SimulatedPatient(record, list(dedup.values()), path + 1, levels,
                            bool(event and followup < FIRST_YEAR_DAYS))


def simulate_cohort(config: SyntheticCohortConfig, threads: int = 1) -> SimulatedCohort:
    """Sample a cohort; each patient draws from its own stream spawned from the seed."""
    config.validate()
    children = np.random.SeedSequence(config.seed).spawn(config.n_patients)
    work = list(enumerate(children))

    def run(item):
        return _simulate_one(config, *item)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            sims = list(ex.map(run, work))
    else:
        sims = [run(w) for w in work]
    purchases = [ev for s in sims for ev in s.purchases]
    return SimulatedCohort(
        [s.record for s in sims],
        purchases,
        np.array([s.path for s in sims]).reshape(-1, T_MONTHS),
        np.array([s.levels for s in sims]).reshape(-1, T_MONTHS, len(DRUGS)),
        np.array([s.died_in_window for s in sims], dtype=bool),
    )


def write_simulation(sim: SimulatedCohort, outdir) -> dict[str, Path]:
    outdir = Path(outdir)
    paths = {
        "patients": outdir / "patients.csv",
        "purchases": outdir / "purchases.csv",
        "truth": outdir / "truth.csv",
    }
    write_patients(sim.patients, paths["patients"])
    write_purchases(sim.purchases, paths["purchases"])
    write_truth(sim.patients, sim.paths, paths["truth"])
    return paths
