"""Exception types shared across the package.

The CLI maps :class:`ValidationError` subclasses to exit code 1 and every
other :class:`LangAdaptError` to exit code 2.
"""


class LangAdaptError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(LangAdaptError):
    """Bad input supplied by the caller (data, config, ordering)."""


class DataError(ValidationError, ValueError):
    pass


class SchemaError(DataError):
    pass


class ConfigError(ValidationError, ValueError):
    pass


class OrderingError(ValidationError):
    """A pipeline stage was requested before its prerequisite stage ran."""


class FormatError(ValidationError):
    pass


class IntegrityError(FormatError):
    pass


class DimensionError(LangAdaptError, ValueError):
    pass


class LengthError(LangAdaptError, ValueError):
    pass


class NumericError(LangAdaptError, ArithmeticError):
    pass
