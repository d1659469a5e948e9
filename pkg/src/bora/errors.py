"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateNormError(ArithmeticError):
    """A row or column norm fell below the configured floor."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class ContractError(RuntimeError):
    """An operation was called outside its preconditions."""


class TrainingDiverged(NumericError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss


class InsufficientDataError(ValueError):
    """Fewer snapshots than a metric needs."""


class AlignmentError(ValueError):
    """Series or runs do not share a timestep grid."""
