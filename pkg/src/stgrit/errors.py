"""Exception hierarchy shared across the package."""


class StgritError(Exception):
    """Base class for all package errors."""


class ShapeError(StgritError, ValueError):
    """Operand shapes or axes are incompatible."""


class NumericalError(StgritError, ArithmeticError):
    """A non-finite value was produced during a forward or backward pass."""

    def __init__(self, op: str, stage: str = "forward", message: str | None = None):
        self.op = op
        self.stage = stage
        super().__init__(message or f"non-finite value produced by '{op}' during {stage} pass")


class TrainingDiverged(NumericalError):
    def __init__(self, epoch: int, source_id: str, cause: NumericalError):
        self.epoch = epoch
        self.source_id = source_id
        super().__init__(cause.op, cause.stage,
                         f"non-finite loss at epoch {epoch}, sequence {source_id!r}: {cause}")


class ContractError(StgritError, RuntimeError):
    """A caller broke an API precondition."""


class BackwardError(ContractError):
    """Misuse of reverse-mode differentiation (non-scalar loss, reused graph, ...)."""


class ConfigError(StgritError, ValueError):
    """Invalid hyperparameter or configuration value."""


class DataError(StgritError, ValueError):
    """Input data failed validation or could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
