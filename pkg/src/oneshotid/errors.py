"""Exception types shared across the library."""


class ShapeError(ValueError):
    """Operands have incompatible or invalid shapes."""


class NumericError(ArithmeticError):
    """A computation produced NaN or Inf from finite inputs."""


class TapeError(RuntimeError):
    """Backward was requested for a tensor that is not attached to a tape."""


class ConfigError(ValueError):
    """A configuration value violates a documented precondition."""


class DataError(ValueError):
    """Dataset contents violate a documented contract."""


class FormatError(ValueError):
    """A binary or text container is malformed."""


class StateError(RuntimeError):
    """An operation was requested in a state that does not permit it."""
