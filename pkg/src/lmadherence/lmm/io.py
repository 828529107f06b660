"""JSON model documents."""

from __future__ import annotations

import json

from ..errors import ValidationError
from .model import FitResult, LmmParameters, ModelSpec

FORMAT_VERSION = 1


def fit_to_dict(fit: FitResult) -> dict:
    return {
        "format": "lmadherence-model",
        "format_version": FORMAT_VERSION,
        "spec": fit.spec.to_dict(),
        "params": fit.params.to_dict(),
        "fit": {
            "loglik": fit.loglik,
            "g": fit.g,
            "aic": fit.aic,
            "bic": fit.bic,
            "n": fit.n,
            "n_iterations": fit.n_iterations,
            "converged": fit.converged,
            "start_id": fit.start_id,
            "loglik_trace": fit.loglik_trace,
        },
    }


def save_model(fit: FitResult, path) -> None:
    with open(path, "w") as fh:
        json.dump(fit_to_dict(fit), fh, indent=1)
        fh.write("\n")


def load_model(path) -> tuple[ModelSpec, LmmParameters, dict]:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: not a model document ({exc})") from exc
    if doc.get("format") != "lmadherence-model":
        raise ValidationError(f"{path}: not a model document")
    if doc.get("format_version", 0) > FORMAT_VERSION:
        raise ValidationError(f"{path}: unsupported format_version {doc['format_version']}")
    spec = ModelSpec.from_dict(doc["spec"])
    params = LmmParameters.from_dict(doc["params"], spec)
    return spec, params, doc.get("fit", {})
