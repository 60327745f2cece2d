"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class ParameterError(ValueError):
    """A scalar or structural parameter is outside its allowed range."""


class DomainError(ValueError):
    """Input values are outside the operation's domain (e.g. a non-binary mask)."""


class UsageError(RuntimeError):
    """An API was called in a state it does not support."""


class NumericalError(ArithmeticError):
    """A non-finite value appeared where only finite values are allowed."""


class DegenerateTaskError(ValueError):
    """A loss has no elements with positive weight."""


class TrainingError(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


class SamplingError(RuntimeError):
    pass


class FormatError(ValueError):
    """A serialized archive is malformed or has an unsupported version."""
