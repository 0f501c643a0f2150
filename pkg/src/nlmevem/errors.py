"""Exception hierarchy shared across the package."""


class NlmeError(Exception):
    """Base class for all package errors."""


class ConfigError(NlmeError, ValueError):
    pass


class CatalogError(NlmeError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class ModelShapeError(NlmeError, ValueError):
    pass


class DataError(NlmeError, ValueError):
    """Malformed dataset; ``line`` is the 1-based CSV line when known."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class PriorCovarianceError(NlmeError, ArithmeticError):
    pass


# autodiff
class NonFiniteError(NlmeError, ArithmeticError):
    def __init__(self, message, chunk=None):
        super().__init__(message)
        self.chunk = chunk


class UnsupportedOpError(NlmeError, TypeError):
    pass


# odesolve
class SolverDivergedError(NlmeError, ArithmeticError):
    def __init__(self, message, time=None, lanes=None):
        super().__init__(message)
        self.time = time
        self.lanes = lanes


class SolverStalledError(NlmeError, RuntimeError):
    pass


# elbo / fit
class NonFiniteObjectiveError(NlmeError, ArithmeticError):
    def __init__(self, message, subjects=()):
        super().__init__(message)
        self.subjects = tuple(subjects)


class InvalidStartError(NlmeError, ValueError):
    pass


# marginal
class DegenerateProposalError(NlmeError, ArithmeticError):
    pass


class IndefiniteHessianError(NlmeError, ArithmeticError):
    pass


class UnsupportedDimensionError(NlmeError, ValueError):
    pass


class UnsupportedModelError(NlmeError, TypeError):
    pass
