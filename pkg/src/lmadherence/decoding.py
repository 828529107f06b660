"""Local and global decoding of latent paths and the nine behavioural profiles."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, ZeroLikelihoodError
from .lmm.model import LmmParameters, ModelSpec
from .lmm.recursions import DataPanel, latent_probs, log_emission_matrix

PROFILE_LABELS = tuple("ABCDEFGHI")
PROFILE_DESCRIPTIONS = {
    "A": "constant at state 1",
    "B": "constant at state 2",
    "C": "constant at state 3",
    "D": "constant at state 4",
    "E": "increasing by one level",
    "F": "increasing by two or three levels",
    "G": "decreasing by one level",
    "H": "decreasing by two or three levels",
    "I": "non-monotone",
}
# ties in path scores closer than this are resolved lexicographically
TIE_TOL = 1e-12


def local_decode(posteriors) -> np.ndarray:
    """Per-occasion argmax of the posteriors as 1-based states (first index wins ties)."""
    return np.argmax(np.asarray(posteriors), axis=-1) + 1


def _log_latent(spec, params, data):
    delta, tau = latent_probs(spec, params, data)
    with np.errstate(divide="ignore"):
        return np.log(delta), np.log(tau), log_emission_matrix(params.phi, data.y, data.mask)


def path_log_joint(spec: ModelSpec, params: LmmParameters, data: DataPanel, paths) -> np.ndarray:
    """log P(U = path, Y = y | x) for one 1-based path per subject, evaluated term by term."""
    log_d, log_tau, log_b = _log_latent(spec, params, data)
    paths = np.asarray(paths).reshape(data.n, spec.T) - 1
    idx = np.arange(data.n)
    out = log_d[idx, paths[:, 0]] + log_b[idx, 0, paths[:, 0]]
    for t in range(1, spec.T):
        out = out + log_tau[idx, t - 1, paths[:, t - 1], paths[:, t]] + log_b[idx, t, paths[:, t]]
    return out


def viterbi_batch(spec: ModelSpec, params: LmmParameters, data: DataPanel) -> tuple[np.ndarray, np.ndarray]:
    """Most probable latent path per subject, in log space.

    Among paths whose log joint lies within ``TIE_TOL`` of the optimum the
    lexicographically smallest is returned. Returns 1-based paths (n, T) and
    their log joint probabilities.
    """
    log_d, log_tau, log_b = _log_latent(spec, params, data)
    n, T, k = log_b.shape
    # best completion score from state u at time t onward (excluding the emission at t)
    V = np.zeros((n, T, k))
    for t in range(T - 2, -1, -1):
        V[:, t] = np.max(log_tau[:, t] + (log_b[:, t + 1] + V[:, t + 1])[:, None, :], axis=2)
    score0 = log_d + log_b[:, 0] + V[:, 0]
    best = score0.max(axis=1)
    if np.any(~np.isfinite(best)):
        raise ZeroLikelihoodError([data.ids[i] for i in np.flatnonzero(~np.isfinite(best))])
    thresh = best - TIE_TOL * np.maximum(1.0, np.abs(best))
    paths = np.empty((n, T), dtype=np.int64)
    paths[:, 0] = np.argmax(score0 >= thresh[:, None], axis=1)
    prefix = log_d[np.arange(n), paths[:, 0]] + log_b[np.arange(n), 0, paths[:, 0]]
    rows = np.arange(n)
    for t in range(1, T):
        step = log_tau[rows, t - 1, paths[:, t - 1]] + log_b[:, t]
        total = prefix[:, None] + step + V[:, t]
        paths[:, t] = np.argmax(total >= thresh[:, None], axis=1)
        prefix = prefix + step[rows, paths[:, t]]
    paths += 1
    return paths, path_log_joint(spec, params, data, paths)


def viterbi_decode(spec: ModelSpec, params: LmmParameters, data: DataPanel, i: int = 0):
    """Global decoding of subject ``i``: ``(path, log joint probability)``."""
    paths, lp = viterbi_batch(spec, params, data.subset([i]))
    return paths[0], float(lp[0])


def classify_profile(path: Sequence[int]) -> str:
    """Map a 4-state path to one of the profiles A-I.

    Monotone paths are labelled by their net change, whatever the number of
    steps; any change of direction gives I.
    """
    s = np.asarray(path)
    if s.ndim != 1 or s.size == 0 or np.any((s < 1) | (s > 4)) or np.any(s != np.round(s)):
        raise ContractError(f"profile classification needs states in 1..4, got {list(path)}")
    d = np.diff(s)
    if np.all(d == 0):
        return PROFILE_LABELS[int(s[0]) - 1]
    net = int(s[-1] - s[0])
    if np.all(d >= 0):
        return "E" if net == 1 else "F"
    if np.all(d <= 0):
        return "G" if net == -1 else "H"
    return "I"


@dataclass
class ProfileTable:
    counts: dict[str, int]
    retained: dict[str, bool]
    min_count: int

    @property
    def n(self) -> int:
        return sum(self.counts.values())

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["profile", "description", "n_patients", "retained"])
            for lab in PROFILE_LABELS:
                w.writerow([lab, PROFILE_DESCRIPTIONS[lab], self.counts[lab], int(self.retained[lab])])


def profile_table(paths: Iterable[Sequence[int]], min_count: int = 1500) -> ProfileTable:
    """Profile frequencies; a profile is retained when at least ``min_count`` patients have it."""
    labels = [classify_profile(p) for p in paths]
    if not labels:
        raise ContractError("profile_table needs at least one path")
    c = Counter(labels)
    counts = {lab: c.get(lab, 0) for lab in PROFILE_LABELS}
    return ProfileTable(counts, {lab: counts[lab] >= min_count for lab in PROFILE_LABELS}, min_count)


def write_paths_csv(ids, paths, posteriors, path) -> None:
    """One row per patient and month with the decoded state and the largest posterior."""
    pmax = np.asarray(posteriors).max(axis=2)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "t", "state", "posterior_max"])
        for pid, states, pm in zip(ids, paths, pmax):
            for t, (s, p) in enumerate(zip(states, pm), start=1):
                w.writerow([pid, t, int(s), repr(float(p))])


def write_profiles_csv(ids, labels, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "profile_label"])
        for pid, lab in zip(ids, labels):
            w.writerow([pid, lab])
