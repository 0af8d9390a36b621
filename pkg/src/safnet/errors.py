"""Exception hierarchy shared across the package.

Every library error derives from SafError so callers (notably the CLI)
can separate our validation failures from genuine I/O problems.
"""


class SafError(Exception):
    """Base class for all safnet errors."""


class ValidationError(SafError):
    """Input data violates a documented invariant."""


class FormatError(SafError):
    """A binary container is malformed (bad magic, truncation, wrong version)."""


class ParseError(SafError):
    """A text input (manifest, config file) cannot be parsed."""


class ConfigError(SafError):
    """A configuration value is out of its legal range."""
