"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: input problems exit with 1, numerical
failures with 2, and I/O errors (plain ``OSError``) with 3.
"""


class ShiftCPError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class InputError(ShiftCPError, ValueError):
    """Malformed or out-of-range input."""


class ParseError(InputError):
    """A data file violates its schema."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class InsufficientCalibrationError(InputError):
    """A class has no calibration examples."""

    def __init__(self, label):
        self.label = label
        super().__init__(f"no calibration examples for class {label}")


class CannotSplitError(InputError):
    """The requested split cannot be formed from the data."""


class NumericalError(ShiftCPError, ArithmeticError):
    exit_code = 2


class DegenerateWeightsError(NumericalError):
    """All weights are zero, so the weighted CDF cannot be normalized."""


class ZeroDensityError(NumericalError):
    """A density estimate underflowed to zero where a ratio was needed."""


class BandwidthSelectionError(NumericalError):
    """No bandwidth candidate produced a finite held-out likelihood."""


class DivergenceError(NumericalError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, learning_rate):
        self.epoch = epoch
        self.learning_rate = learning_rate
        super().__init__(
            f"loss became non-finite at epoch {epoch} "
            f"(learning_rate={learning_rate})"
        )
