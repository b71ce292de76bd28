"""Exception types shared across the package."""


class HMRError(Exception):
    """Base class for all package errors."""


class DimensionError(HMRError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(HMRError, ValueError):
    """A hyperparameter is outside its valid range."""


class ValidationError(HMRError, ValueError):
    """Input data violates an operation's contract."""


class ConfigurationError(HMRError, ValueError):
    """A configuration object is inconsistent."""


class StateError(HMRError, RuntimeError):
    """An object is used before it holds the state the call needs."""


class InfeasibleError(HMRError, ValueError):
    """No feasible solution exists for an assignment problem."""


class UsageError(HMRError, ValueError):
    """An API or CLI entry point was called with incompatible arguments."""


class DivergenceError(HMRError, RuntimeError):
    """Training produced a non-finite or exploding loss."""
