"""Exception hierarchy shared by every subpackage."""


class ContractError(ValueError):
    """An operation was called with inputs that violate its preconditions."""


class ShapeError(ContractError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ContractError, ArithmeticError):
    """Input lies outside the mathematical domain of the operation (log/sqrt of a negative)."""


class TapeError(RuntimeError):
    """Misuse of a computation tape, e.g. replaying backward on a consumed tape."""


class UnreliableCheckError(RuntimeError):
    """The function under a gradient check is not deterministic."""


class TrainingDiverged(RuntimeError):
    """A non-finite loss was produced during training.

    ``snapshot`` carries the step index, the loss components and the
    per-parameter gradient norms at the time of failure.
    """

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}
