"""Model-selection grid: number of states by BIC, then forward covariate selection."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ..errors import ContractError, LmAdherenceError
from .em import EmOptions, em_fit
from .model import FitResult, LmmParameters, ModelSpec, TransitionForm, transition_tensor
from .recursions import DataPanel

log = logging.getLogger(__name__)


def mean_transition_matrix(spec: ModelSpec, params: LmmParameters, data: DataPanel | None = None) -> np.ndarray:
    """Transition matrix averaged over subjects and occasions t = 2..T."""
    if spec.transition_form is TransitionForm.UNRESTRICTED:
        return params.tau.mean(axis=0)
    if not spec.trans_covariates:
        return transition_tensor(params.gamma, np.ones((1, 1)))[0]
    if data is None:
        raise ContractError("covariate-dependent transitions need data to average over")
    _, x_trans = data.design(spec)
    tau = transition_tensor(params.gamma, x_trans[:, 1:, :])
    return tau.reshape(-1, spec.k, spec.k).mean(axis=0)


@dataclass
class SelectionRow:
    label: str
    spec: ModelSpec
    g: int | None = None
    loglik: float | None = None
    aic: float | None = None
    bic: float | None = None
    status: str = "ok"
    selected_k: bool = False
    selected: bool = False
    fit: FitResult | None = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def describe(self) -> str:
        covs = sorted(set(self.spec.init_covariates) | set(self.spec.trans_covariates))
        return "+".join(covs) if covs else "-"


@dataclass
class SelectionResult:
    rows: list[SelectionRow]
    chosen_k: int
    best: FitResult

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", "form", "covariates", "k", "g", "loglik", "aic", "bic",
                        "status", "selected_k", "selected"])
            for r in self.rows:
                w.writerow([
                    r.label, r.spec.transition_form.value, r.describe(), r.spec.k,
                    "" if r.g is None else r.g,
                    "" if r.loglik is None else repr(r.loglik),
                    "" if r.aic is None else repr(r.aic),
                    "" if r.bic is None else repr(r.bic),
                    r.status, int(r.selected_k), int(r.selected),
                ])


def _fit_row(label, spec, data, options) -> SelectionRow:
    row = SelectionRow(label, spec)
    try:
        fit = em_fit(spec, data, options)
    except LmAdherenceError as exc:
        log.warning("%s (k=%d) failed: %s", label, spec.k, exc)
        row.status = f"failed: {exc}"
        return row
    row.fit, row.g, row.loglik, row.aic, row.bic = fit, fit.g, fit.loglik, fit.aic, fit.bic
    if not fit.converged:
        log.info("%s (k=%d) hit max_iter without converging", label, spec.k)
    return row


def model_selection(
    data: DataPanel,
    k_range: Iterable[int],
    covariate_grid: Sequence[str] = (),
    options: EmOptions | None = None,
    basic_form: TransitionForm | str = TransitionForm.UNRESTRICTED,
    template: ModelSpec | None = None,
) -> SelectionResult:
    """Fit basic models over ``k_range``, pick k by BIC, then add covariates forward.

    Covariates enter both the initial and the transition logits. Each round adds
    the covariate with the largest BIC improvement and stops when none improves.
    """
    options = options or EmOptions()
    k_range = list(k_range)
    if not k_range:
        raise ContractError("k_range must not be empty")
    basic_form = TransitionForm(basic_form)
    template = template or ModelSpec(1, T=data.T)

    def spec_for(k, form, covs=()):
        return ModelSpec(k, template.drugs, template.categories, data.T, tuple(covs), tuple(covs), form)

    rows: list[SelectionRow] = []
    for k in k_range:
        rows.append(_fit_row("M1" if basic_form is TransitionForm.UNRESTRICTED else "M2",
                             spec_for(k, basic_form), data, options))
    basic_ok = [r for r in rows if r.ok]
    if not basic_ok:
        raise LmAdherenceError("every basic model in the grid failed")
    chosen = min(basic_ok, key=lambda r: r.bic)
    chosen.selected_k = True
    k = chosen.spec.k
    current = chosen

    if covariate_grid:
        if basic_form is TransitionForm.UNRESTRICTED:
            current = _fit_row("M2", spec_for(k, TransitionForm.LOGIT), data, options)
            rows.append(current)
            if not current.ok:
                raise LmAdherenceError(f"logit model at k={k} failed: {current.status}")
        included: list[str] = []
        remaining = [c for c in covariate_grid]
        step = 3
        while remaining:
            trials = []
            for cov in remaining:
                row = _fit_row(f"M{step}", spec_for(k, TransitionForm.LOGIT, included + [cov]), data, options)
                rows.append(row)
                step += 1
                if row.ok:
                    trials.append((row, cov))
            if not trials:
                break
            row, cov = min(trials, key=lambda rc: rc[0].bic)
            if row.bic >= current.bic:
                break
            included.append(cov)
            remaining.remove(cov)
            current = row
    current.selected = True
    return SelectionResult(rows, k, current.fit)
