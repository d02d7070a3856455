"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Operand shapes do not agree."""


class ConfigurationError(ValueError):
    """A layer stack, plan, schedule or run setup is not usable."""


class InputError(ValueError):
    """Caller-supplied data does not match what the operation expects."""


class UsageError(RuntimeError):
    """An API was called in an invalid state."""


class NonFiniteError(FloatingPointError):
    """A tensor would hold NaN or Inf."""


class FormatError(ValueError):
    """A file does not follow its binary or text layout."""


class ConsistencyError(ValueError):
    """Two related pieces of a file disagree (e.g. image vs label counts)."""


class ParseError(ValueError):
    """A text file could not be parsed; message carries the line number."""


class ValidationError(ValueError):
    """A parsed value is outside its allowed range."""


class InvariantError(RuntimeError):
    """An internal invariant broke mid-run; the run must abort."""
