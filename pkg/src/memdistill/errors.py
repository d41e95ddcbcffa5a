"""Exception hierarchy shared by all modules."""


class InvalidInputError(ValueError):
    pass


class DegenerateInputError(InvalidInputError):
    """Input is well-formed but leaves the quantity undefined."""


class ConfigError(ValueError):
    pass


class OrderingError(ValueError):
    pass


class ConsistencyError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class FormatError(ValueError):
    """Base class for on-disk parse failures."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass
