"""Exception hierarchy shared by all modules."""


class FpfGainError(Exception):
    """Base class for every error raised by the package."""


class InvalidParameterError(FpfGainError, ValueError):
    """A scalar parameter (bandwidth, iteration count, ...) is out of range."""


class InvalidInputError(FpfGainError, ValueError):
    """Array input has the wrong shape or contains non-finite values."""


class DegenerateEnsembleError(FpfGainError):
    """The ensemble cannot support the requested construction."""


class DegenerateWeightsError(FpfGainError):
    """All importance weights vanished."""


class QuadratureError(FpfGainError, ArithmeticError):
    """Adaptive quadrature failed to converge."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class GainSolverError(FpfGainError):
    """Gain computation failed inside a filter run."""

    def __init__(self, step, cause):
        super().__init__(f"gain computation failed at step {step}: {cause}")
        self.step = step
        self.cause = cause
