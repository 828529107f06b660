"""Pipeline configuration and the stage functions behind the CLI subcommands.

Each stage reads its inputs, computes everything in memory and only then
writes its artifacts, so a failing stage leaves no partial output.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import adherence, cohort, decoding
from .errors import ComputationError, ValidationError
from .lmm import EmOptions, ModelSpec, TransitionForm, load_model, model_selection, save_model
from .lmm.io import fit_to_dict
from .lmm.recursions import DataPanel, forward_backward_batch
from .lmm.selection import mean_transition_matrix
from .survival import cox_fit, format_p, km_estimate, logrank_test, rmst_difference, write_curves_csv

log = logging.getLogger(__name__)

LANDMARK_DAYS = cohort.FIRST_YEAR_DAYS


@dataclass
class PipelineConfig:
    seed: int
    output: Path
    patients: Path
    purchases: Path
    simulation: dict | None = None
    k_range: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    covariates: list[str] = field(default_factory=lambda: ["age", "gender", "mcs"])
    basic_form: TransitionForm = TransitionForm.UNRESTRICTED
    em: EmOptions = field(default_factory=EmOptions)
    min_count: int = 1500
    decode_mode: str = "global"
    tau: float = 7.0
    ties: str = "efron"
    landmark: bool = True
    rmst_origin: str = "landmark"
    alpha: float = 0.05
    threads: int = 1

    @classmethod
    def from_dict(cls, d: dict, base_dir=".", seed=None, output=None, threads=None) -> "PipelineConfig":
        base = Path(base_dir)

        def resolve(p):
            p = Path(p)
            return p if p.is_absolute() else base / p

        if seed is None:
            seed = d.get("seed")
        if seed is None:
            raise ValidationError("a seed is required (config 'seed' or --seed)")
        try:
            seed = int(seed)
        except (TypeError, ValueError):
            raise ValidationError(f"seed must be an integer, got {seed!r}") from None
        if not 0 <= seed < 2**64:
            raise ValidationError("seed must fit in an unsigned 64-bit integer")
        paths = d.get("paths", {})
        out = Path(output) if output is not None else resolve(paths.get("output", "output"))
        patients = resolve(paths["patients"]) if "patients" in paths else out / "patients.csv"
        purchases = resolve(paths["purchases"]) if "purchases" in paths else out / "purchases.csv"

        sim = d.get("simulation")
        if isinstance(sim, str):
            sim_path = resolve(sim)
            try:
                with open(sim_path) as fh:
                    sim = json.load(fh)
            except OSError as exc:
                raise ValidationError(f"cannot read simulation config {sim_path}: {exc}") from exc
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{sim_path}: invalid JSON ({exc})") from exc

        m, e, p, s = (d.get(key, {}) for key in ("model", "em", "profile", "survival"))
        threads = int(threads if threads is not None else d.get("threads", 1))
        try:
            cfg = cls(
                seed=seed,
                output=out,
                patients=patients,
                purchases=purchases,
                simulation=sim,
                k_range=[int(k) for k in m.get("k_range", [1, 2, 3, 4, 5])],
                covariates=list(m.get("covariates", ["age", "gender", "mcs"])),
                basic_form=TransitionForm(m.get("basic_form", "unrestricted")),
                em=EmOptions(
                    max_iter=int(e.get("max_iter", 500)),
                    tol=float(e.get("tol", 1e-8)),
                    n_random_starts=int(e.get("n_random_starts", 9)),
                    seed=seed,
                    threads=threads,
                ),
                min_count=int(p.get("min_count", 1500)),
                decode_mode=str(p.get("decode_mode", "global")),
                tau=float(s.get("tau", 7.0)),
                ties=str(s.get("tie_method", "efron")),
                landmark=bool(s.get("landmark", True)),
                rmst_origin=str(s.get("rmst_origin", "landmark")),
                alpha=float(s.get("alpha", 0.05)),
                threads=threads,
            )
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"malformed pipeline config: {exc}") from exc
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if not self.k_range or any(k < 1 for k in self.k_range):
            raise ValidationError("k_range must be a nonempty list of integers >= 1")
        unknown = [c for c in self.covariates if c not in ("age", "gender", "mcs")]
        if unknown:
            raise ValidationError(f"unknown covariates {unknown}")
        if self.em.max_iter < 1 or self.em.tol <= 0 or self.em.n_random_starts < 0:
            raise ValidationError("invalid EM options")
        if self.min_count < 0:
            raise ValidationError("min_count must be >= 0")
        if self.decode_mode not in ("global", "local"):
            raise ValidationError("decode_mode must be 'global' or 'local'")
        if self.tau <= 0:
            raise ValidationError("tau must be positive")
        if self.ties not in ("efron", "breslow"):
            raise ValidationError("tie_method must be 'efron' or 'breslow'")
        if self.rmst_origin not in ("landmark", "index"):
            raise ValidationError("rmst_origin must be 'landmark' or 'index'")
        if self.threads < 1:
            raise ValidationError("threads must be >= 1")

    def require_inputs(self, *paths: Path) -> None:
        for p in paths:
            if not Path(p).is_file():
                raise ValidationError(f"input file not found: {p}")


def load_config(path, seed=None, output=None, threads=None) -> PipelineConfig:
    path = Path(path)
    try:
        with open(path) as fh:
            d = json.load(fh)
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    return PipelineConfig.from_dict(d, path.parent, seed, output, threads)


# -- artifacts ---------------------------------------------------------------------


def write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, allow_nan=False)
        fh.write("\n")


@dataclass
class Cohort:
    patients: list[cohort.PatientRecord]
    purchases: list[cohort.PurchaseEvent]
    selection: cohort.CohortSelection
    panels: list[adherence.AdherencePanel]
    data: DataPanel


def build_cohort(cfg: PipelineConfig) -> Cohort:
    cfg.require_inputs(cfg.patients, cfg.purchases)
    patients, purchases = cohort.load_cohort(cfg.patients, cfg.purchases)
    sel = cohort.select_cohort(patients, purchases)
    if not sel.kept:
        raise ValidationError("no patients left after cohort selection")
    panels = adherence.build_panels(sel.kept, purchases)
    y, mask = adherence.panel_arrays(panels)
    data = DataPanel(y, mask, cohort.covariate_arrays(sel.kept), [p.patient_id for p in sel.kept])
    return Cohort(patients, purchases, sel, panels, data)


def cohort_summary(c: Cohort) -> str:
    users = c.data.mask.mean(axis=0)
    share = ", ".join(f"{d} {u:.1%}" for d, u in zip(cohort.DRUGS, users))
    return (f"{len(c.patients)} patients, {len(c.purchases)} purchases; kept {len(c.selection.kept)} "
            f"(excluded {len(c.selection.died_in_window)} first-year deaths, "
            f"{len(c.selection.censored_without_purchase)} censored without purchase); users: {share}")


def run_simulate(cfg: PipelineConfig, n_patients=None):
    if cfg.simulation is None:
        raise ValidationError("config has no 'simulation' section")
    d = dict(cfg.simulation)
    d["seed"] = cfg.seed
    if n_patients is not None:
        d["n_patients"] = n_patients
    sim_cfg = cohort.SyntheticCohortConfig.from_dict(d)
    sim_cfg.validate()
    sim = cohort.simulate_cohort(sim_cfg, threads=cfg.threads)
    summary = (f"simulated {len(sim.patients)} patients, {len(sim.purchases)} purchases, "
               f"{int(sim.died_in_window.sum())} first-year deaths, "
               f"{sum(p.event for p in sim.patients)} deaths overall")
    return sim, summary


def write_simulate(cfg: PipelineConfig, sim) -> None:
    cfg.output.mkdir(parents=True, exist_ok=True)
    cohort.write_patients(sim.patients, cfg.patients)
    cohort.write_purchases(sim.purchases, cfg.purchases)
    cohort.write_truth(sim.patients, sim.paths, cfg.output / "truth.csv")


def run_fit(cfg: PipelineConfig, c: Cohort):
    return model_selection(c.data, cfg.k_range, cfg.covariates, cfg.em, cfg.basic_form)


def write_fit(cfg: PipelineConfig, result) -> None:
    cfg.output.mkdir(parents=True, exist_ok=True)
    result.to_csv(cfg.output / "selection.csv")
    save_model(result.best, cfg.output / "model.json")


@dataclass
class ProfileRun:
    ids: list[str]
    paths: np.ndarray
    posteriors: np.ndarray
    labels: list[str]
    table: decoding.ProfileTable
    mean_tau: np.ndarray


def run_profile(cfg: PipelineConfig, c: Cohort, model_path: Path) -> ProfileRun:
    cfg.require_inputs(model_path)
    spec, params, _ = load_model(model_path)
    try:
        c.data.check(spec)
    except ValueError as exc:
        raise ValidationError(f"model {model_path} does not match the data: {exc}") from exc
    if spec.k != 4:
        raise ValidationError(f"behavioural profiles need a 4-state model, {model_path} has k={spec.k}")
    post = forward_backward_batch(spec, params, c.data, cfg.threads)
    if cfg.decode_mode == "global":
        paths, _ = decoding.viterbi_batch(spec, params, c.data)
    else:
        paths = decoding.local_decode(post.post)
    labels = [decoding.classify_profile(p) for p in paths]
    table = decoding.profile_table(paths, cfg.min_count)
    return ProfileRun(list(c.data.ids), paths, post.post, labels, table,
                      mean_transition_matrix(spec, params, c.data))


def write_profile(cfg: PipelineConfig, run: ProfileRun) -> None:
    cfg.output.mkdir(parents=True, exist_ok=True)
    decoding.write_paths_csv(run.ids, run.paths, run.posteriors, cfg.output / "paths.csv")
    decoding.write_profiles_csv(run.ids, run.labels, cfg.output / "profiles.csv")
    run.table.to_csv(cfg.output / "profile_counts.csv")


def read_profiles(path) -> dict[str, str]:
    out = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"patient_id", "profile_label"} <= set(reader.fieldnames):
            raise ValidationError(f"{path}: expected columns patient_id, profile_label")
        for row in reader:
            lab = row["profile_label"].strip()
            if lab not in decoding.PROFILE_LABELS:
                raise ValidationError(f"{path}:{reader.line_num}: unknown profile {lab!r}")
            out[row["patient_id"].strip()] = lab
    return out


@dataclass
class SurvivalRun:
    curves: dict
    report: dict
    cox: object


def run_survival(cfg: PipelineConfig, c: Cohort, profiles_path: Path) -> SurvivalRun:
    cfg.require_inputs(profiles_path)
    labels = read_profiles(profiles_path)
    by_id = {p.patient_id: p for p in c.selection.kept}
    unknown = sorted(set(labels) - set(by_id))
    if unknown:
        raise ValidationError(f"profiles reference unknown or excluded patients: {unknown[:10]}")
    ids = [pid for pid in by_id if pid in labels]
    offset = LANDMARK_DAYS if cfg.landmark else 0
    rec = [by_id[pid] for pid in ids]
    time = np.array([(p.followup_days - offset) / cohort.DAYS_PER_YEAR for p in rec])
    event = np.array([p.event for p in rec], dtype=bool)
    group = np.array([labels[pid] for pid in ids])
    X_cov = np.array([[p.age, p.female, np.mean(p.mcs)] for p in rec], dtype=float).reshape(-1, 3)
    positive = time > 0
    n_dropped = int((~positive).sum())
    time, event, group, X_cov = time[positive], event[positive], group[positive], X_cov[positive]

    counts = {lab: int((group == lab).sum()) for lab in decoding.PROFILE_LABELS}
    retained = [lab for lab in decoding.PROFILE_LABELS if counts[lab] >= max(cfg.min_count, 1)]
    if len(retained) < 2:
        raise ComputationError(f"need at least 2 retained profiles for survival analysis, got {retained}")
    keep = np.isin(group, retained)
    time, event, group, X_cov = time[keep], event[keep], group[keep], X_cov[keep]

    curves = {lab: km_estimate(time[group == lab], event[group == lab]) for lab in retained}
    lr = logrank_test(time, event, group, retained)

    if "A" not in retained:
        raise ComputationError("reference profile A is not among the retained profiles")
    others = [lab for lab in retained if lab != "A"]
    X = np.column_stack([(group == lab).astype(float) for lab in others] + [X_cov])
    names = [f"profile_{lab}" for lab in others] + ["age", "gender_F", "mcs_mean"]
    cox = cox_fit(time, event, X, names, ties=cfg.ties)

    tau = cfg.tau - (LANDMARK_DAYS / cohort.DAYS_PER_YEAR if cfg.landmark and cfg.rmst_origin == "index" else 0.0)
    rmst = None
    if "D" in retained:
        a, b = group == "D", group == "A"
        rmst = rmst_difference(time[a], event[a], time[b], event[b], tau).to_dict()
        rmst.update({"group_a": "D", "group_b": "A", "origin": cfg.rmst_origin})

    report = {
        "n_samples": int(time.size),
        "n_events": int(event.sum()),
        "excluded_nonpositive_time": n_dropped,
        "clock": "landmark" if cfg.landmark else "index",
        "profile_counts": counts,
        "retained": retained,
        "logrank": {"statistic": lr.statistic, "df": lr.df, "p_value": lr.p_value,
                    "p_value_text": format_p(lr.p_value),
                    "observed": lr.observed.tolist(), "expected": lr.expected.tolist()},
        "cox": {"reference": "A", "ties": cfg.ties, "loglik": cox.loglik, "iterations": cox.n_iter,
                "terms": cox.table()},
        "rmst": rmst,
    }
    return SurvivalRun(curves, report, cox)


def write_survival(cfg: PipelineConfig, run: SurvivalRun) -> None:
    cfg.output.mkdir(parents=True, exist_ok=True)
    write_curves_csv(run.curves, cfg.output / "km_curves.csv")
    run.cox.to_csv(cfg.output / "cox.csv")
    write_json(run.report, cfg.output / "survival_report.json")


def run_report(cfg: PipelineConfig) -> tuple[dict, str]:
    out = cfg.output
    model_path, surv_path = out / "model.json", out / "survival_report.json"
    cfg.require_inputs(out / "selection.csv", model_path, out / "profile_counts.csv", surv_path)
    with open(out / "selection.csv", newline="") as fh:
        selection = list(csv.DictReader(fh))
    with open(out / "profile_counts.csv", newline="") as fh:
        profiles = list(csv.DictReader(fh))
    with open(surv_path) as fh:
        surv = json.load(fh)
    spec, params, meta = load_model(model_path)
    report = {
        "selection": selection,
        "model": {"spec": spec.to_dict(), "loglik": meta.get("loglik"), "bic": meta.get("bic")},
        "profiles": profiles,
        "survival": surv,
    }
    lines = [f"selected model: k={spec.k}, form={spec.transition_form.value}, "
             f"covariates={list(spec.trans_covariates) or '-'}, BIC={meta.get('bic'):.1f}"]
    lines.append("profiles: " + ", ".join(f"{r['profile']}={r['n_patients']}" for r in profiles))
    lr = surv["logrank"]
    lines.append(f"log-rank: chi2={lr['statistic']:.2f} df={lr['df']} p={lr['p_value_text']}")
    for t in surv["cox"]["terms"]:
        lines.append(f"  HR {t['term']}: {t['hr']:.3f} [{t['ci_lower']:.3f}, {t['ci_upper']:.3f}]")
    if surv.get("rmst"):
        r = surv["rmst"]
        lines.append(f"dRMST D-A (tau={r['tau']:.2f}y): {r['difference']:.3f} [{r['ci_lower']:.3f}, {r['ci_upper']:.3f}]")
    return report, "\n".join(lines)


__all__ = [
    "Cohort", "PipelineConfig", "build_cohort", "cohort_summary", "fit_to_dict", "load_config",
    "run_fit", "run_profile", "run_report", "run_simulate", "run_survival", "write_fit",
    "write_json", "write_profile", "write_simulate", "write_survival", "ModelSpec",
]
