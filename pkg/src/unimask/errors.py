"""Error types shared across the package.

The CLI maps these to distinct exit codes, so raise the most specific
one that applies instead of a bare ValueError when the failure is
user-facing.
"""


class ConfigError(Exception):
    """Bad or inconsistent configuration (unknown key, invalid value)."""


class DataError(Exception):
    """Malformed corpus files, tokens outside a vocabulary, bad records."""


class GenerationError(DataError):
    """The scene generator could not satisfy its placement constraints."""


class InvariantViolation(Exception):
    """An internal runtime invariant failed; indicates a bug, not bad input."""
