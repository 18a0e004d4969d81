"""Exception types shared across the package."""


class MVFusionError(Exception):
    """Base class for all package errors."""


class DimensionError(MVFusionError, ValueError):
    """Shapes or dimensions of inputs do not agree."""


class NumericError(MVFusionError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class ContractError(MVFusionError, ValueError):
    """A precondition of an operation was violated."""


class WeightingError(ContractError):
    """A minibatch cannot be weighted because a required stratum is empty."""


class ConfigError(MVFusionError, ValueError):
    """Invalid configuration or dataset for the requested run."""


class ParseError(MVFusionError, ValueError):
    """Malformed input file."""
