"""Dataset condensation by gradient matching on a pool of lightly trained,
randomly perturbed models."""

from .errors import (
    CondenserError,
    ConfigError,
    DataFormatError,
    GradientError,
    NanLossError,
    ShapeError,
)

__version__ = "0.1.0"

__all__ = [
    "CondenserError",
    "ConfigError",
    "DataFormatError",
    "GradientError",
    "NanLossError",
    "ShapeError",
    "__version__",
]
