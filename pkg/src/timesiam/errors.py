"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration problems exit 1, data and
I/O problems exit 2, numerical failures exit 3.
"""


class TimeSiamError(Exception):
    pass


class ConfigError(TimeSiamError, ValueError):
    """Invalid hyperparameters or an unsupported combination of options."""


class ShapeError(TimeSiamError, ValueError):
    """Operand shapes are incompatible for an operation."""


class DataError(TimeSiamError):
    """Input data could not be read or does not satisfy the expected format."""


class IngestionError(DataError):
    pass


class CheckpointError(DataError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    """A stored tensor does not fit the model it is being loaded into."""

    def __init__(self, name, expected, found):
        self.name = name
        self.expected = tuple(expected) if expected is not None else None
        self.found = tuple(found) if found is not None else None
        if found is None:
            msg = f"tensor {name!r} missing from checkpoint (expected {self.expected})"
        elif expected is None:
            msg = f"unexpected tensor {name!r} in checkpoint with shape {self.found}"
        else:
            msg = f"shape mismatch for tensor {name!r}: model expects {self.expected}, checkpoint has {self.found}"
        super().__init__(msg)


class NumericalError(TimeSiamError, ArithmeticError):
    pass


class DivergenceError(NumericalError):
    def __init__(self, step, loss):
        self.step = step
        self.loss = loss
        super().__init__(f"training diverged at step {step}: loss={loss}")
