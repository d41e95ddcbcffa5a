"""Long-horizon image-to-point-cloud feature distillation at desk scale."""

from memdistill.errors import (
    BadMagicError,
    ConfigError,
    ConsistencyError,
    DegenerateInputError,
    FormatError,
    InvalidInputError,
    OrderingError,
    TrainingError,
    TruncatedFileError,
    VersionMismatchError,
)

__version__ = "0.1.0"

__all__ = [
    "BadMagicError",
    "ConfigError",
    "ConsistencyError",
    "DegenerateInputError",
    "FormatError",
    "InvalidInputError",
    "OrderingError",
    "TrainingError",
    "TruncatedFileError",
    "VersionMismatchError",
]
