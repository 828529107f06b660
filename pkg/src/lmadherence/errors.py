"""Exception hierarchy shared by all modules."""


class LmAdherenceError(Exception):
    """Base class."""


class ContractError(LmAdherenceError, ValueError):
    """A precondition on arguments was violated."""


class ValidationError(LmAdherenceError):
    """Bad configuration or input data, detected before any computation."""


class CohortFormatError(ValidationError):
    def __init__(self, path, line, column, message):
        self.path, self.line, self.column = str(path), line, column
        super().__init__(f"{path}:{line}: column {column!r}: {message}")


class OrphanPurchaseError(ValidationError):
    def __init__(self, ids):
        self.ids = sorted(ids)
        super().__init__("purchases reference unknown patient ids: " + ", ".join(self.ids))


class ComputationError(LmAdherenceError):
    """A numerical routine could not produce a result."""


class ZeroLikelihoodError(ComputationError):
    def __init__(self, subjects):
        self.subjects = list(subjects)
        super().__init__(
            f"observed data has probability 0 under the parameters for subject(s) {self.subjects[:10]}"
        )


class ConvergenceError(ComputationError):
    def __init__(self, message, trace=()):
        self.trace = list(trace)
        super().__init__(f"{message}; loglik trace: {self.trace}")


class RankDeficiencyError(ComputationError):
    def __init__(self, column):
        self.column = column
        super().__init__(f"design matrix is rank deficient: column {column!r} is collinear")


class HorizonError(ComputationError):
    pass
