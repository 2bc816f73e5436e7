"""Exception types shared across the package.

The CLI maps these onto exit codes: usage/input problems exit 1, I/O
problems exit 2 (plain OSError), file-format and data problems exit 3.
"""


class DimensionError(ValueError):
    """Array shapes do not line up for the requested operation."""


class InputError(ValueError):
    """An argument value is outside the operation's documented domain."""


class FormatError(RuntimeError):
    """A file does not conform to its documented byte layout."""


class DataError(ValueError):
    """File contents are structurally valid but semantically broken."""
