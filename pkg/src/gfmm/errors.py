"""Exception hierarchy shared by every module of the package."""


class GFMMError(Exception):
    """Base class for all package errors."""


class DimensionError(GFMMError, ValueError):
    """Operand shapes do not agree."""


class ConfigError(GFMMError, ValueError):
    """Invalid structural or experiment configuration.

    ``field`` carries the dotted path of the offending entry when known.
    """

    def __init__(self, message, field=None):
        self.field = field
        if field:
            message = f"{field}: {message}"
        super().__init__(message)


class ContractError(GFMMError, ValueError):
    """A documented precondition of an operation was violated."""


class TapeStateError(GFMMError, RuntimeError):
    """The gradient tape was used after being consumed."""


class NumericalError(GFMMError, ArithmeticError):
    """A numerical procedure failed (factorization, convergence, NaN)."""


class SingularityError(NumericalError):
    """Zero pivot in a direct solve."""


class DomainError(GFMMError, ValueError):
    """Input outside the mathematical domain of an operator."""


class UndefinedMetricError(GFMMError, ArithmeticError):
    """A metric's denominator vanished."""


class UnsupportedError(GFMMError, NotImplementedError):
    """The requested combination of options is not supported."""


class IntegrityError(GFMMError, IOError):
    """A container file is truncated, corrupt or otherwise unreadable."""


class VersionError(IntegrityError):
    """A container file was written by an incompatible format version."""


class TrainingAborted(NumericalError):
    """Training hit a non-finite loss; ``checkpoint`` points at the dump."""

    def __init__(self, message, iteration=None, checkpoint=None):
        super().__init__(message)
        self.iteration = iteration
        self.checkpoint = checkpoint
