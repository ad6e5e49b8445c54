"""Exception taxonomy shared across the package.

CLI exit codes map onto these: usage errors exit 1, validation/parse
errors exit 2, numeric failures exit 3.
"""


class SlotgenError(Exception):
    """Base class for all package errors."""


class InputError(SlotgenError, ValueError):
    """A caller violated an input precondition (empty corpus, bad value)."""


class DimensionError(SlotgenError, ValueError):
    """Tensor shapes violate an operation's contract."""


class ConfigError(SlotgenError, ValueError):
    """Run configuration is inconsistent or contains unknown keys."""


class ParseError(SlotgenError, ValueError):
    """A file could not be parsed; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(SlotgenError, ValueError):
    """Parsed data violates a structural invariant."""


class GraphError(SlotgenError, RuntimeError):
    """Misuse of the autodiff graph (e.g. backward called twice)."""


class NumericError(SlotgenError, RuntimeError):
    """A numeric failure such as NaN gradients or NaN loss."""
