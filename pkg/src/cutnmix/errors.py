"""Exception types raised across the package."""


class CutnMixError(Exception):
    """Base class for all package errors."""


class ParameterError(CutnMixError, ValueError):
    """A scalar argument is outside its admissible range."""


class ConfigurationError(CutnMixError, ValueError):
    """A configuration value (peer count, architecture, mode) is invalid."""


class ValidationError(CutnMixError, ValueError):
    """Tensor shapes or contents violate an operation's preconditions."""


class BatchSizeError(ValidationError):
    pass


class ConsistencyError(ValidationError):
    """Peer batches disagree in shape or labels."""


class FormatError(CutnMixError, ValueError):
    """A dataset file does not follow the expected binary record layout."""


class NonFiniteLossError(CutnMixError, RuntimeError):
    """Training produced a NaN or infinite loss."""
