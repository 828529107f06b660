from .em import EmOptions, em_fit, fit_reference_logit, logit_objective
from .io import load_model, save_model
from .model import (
    FitResult,
    LmmParameters,
    ModelSpec,
    TransitionForm,
    canonicalize,
    count_free_params,
    information_criteria,
    initial_probs,
    permute_states,
    transition_row,
)
from .recursions import (
    DataPanel,
    emission_matrix,
    emission_weight,
    forward_backward,
    forward_backward_batch,
    log_likelihood,
)
from .selection import SelectionResult, mean_transition_matrix, model_selection

__all__ = [
    "DataPanel", "EmOptions", "FitResult", "LmmParameters", "ModelSpec", "SelectionResult",
    "TransitionForm", "canonicalize", "count_free_params", "em_fit", "emission_matrix",
    "emission_weight", "fit_reference_logit", "forward_backward", "forward_backward_batch",
    "information_criteria", "initial_probs", "load_model", "log_likelihood", "logit_objective",
    "mean_transition_matrix", "model_selection", "permute_states", "save_model", "transition_row",
]
