"""Multi-view variational fusion: weighted-mixture posteriors over a shared
latent, semi-supervised classification and missing-view imputation."""

from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    MVFusionError,
    NumericError,
    ParseError,
    WeightingError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "DimensionError", "MVFusionError", "NumericError",
    "ParseError", "WeightingError", "__version__",
]
