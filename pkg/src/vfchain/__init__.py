"""Voice-face association: contrastive encoders plus chaining-cluster score refinement."""

__version__ = "0.1.0"

from .errors import ConfigError, DegenerateInputError, DimensionError, FormatError, VFChainError  # noqa: E402

__all__ = [
    "__version__",
    "VFChainError",
    "ConfigError",
    "FormatError",
    "DimensionError",
    "DegenerateInputError",
]
