"""Exception types shared across the package."""


class BcoptError(Exception):
    """Base class for all package errors."""


class InvalidInputError(BcoptError):
    """Shape mismatch, non-finite entries, or otherwise malformed input."""


class ConvergenceError(BcoptError):
    """Iterative routine hit its iteration cap before reaching tolerance."""

    def __init__(self, message, off_diagonal_norm=None):
        super().__init__(message)
        self.off_diagonal_norm = off_diagonal_norm


class InsufficientMicrobatchesError(BcoptError):
    """Fewer than two microbatch statistics; variance of the mean undefined."""


class DomainError(BcoptError):
    """A map was evaluated outside its domain (e.g. damped value <= 0)."""

    def __init__(self, message, coordinate=None):
        super().__init__(message)
        self.coordinate = coordinate


class ConfigurationError(BcoptError):
    """Invalid run or experiment configuration."""


class PoisonedStepError(BcoptError):
    """A gradient contained NaN/Inf; the step was refused, state unchanged."""


class InitializationError(BcoptError):
    """Optimizer state lacks a required cache for the requested step."""


class UnsupportedProblemError(BcoptError):
    """The task does not expose what the caller needs."""


class PreconditionError(BcoptError):
    """A theoretical bound was evaluated outside its stated conditions."""

    def __init__(self, message, max_step_size=None):
        super().__init__(message)
        self.max_step_size = max_step_size


class InsufficientSignalError(BcoptError):
    """Too few Monte Carlo points above the noise floor to fit a slope."""

    def __init__(self, message, floored_ms=()):
        super().__init__(message)
        self.floored_ms = tuple(floored_ms)
