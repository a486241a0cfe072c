"""Exception taxonomy shared across the package.

The CLI maps these onto distinct exit codes, so library code should raise
the most specific class that applies instead of bare ValueError.
"""


class ConfigError(ValueError):
    """Bad experiment configuration: unknown key, unparseable value, missing field."""


class FormatError(ValueError):
    """Malformed on-disk artifact: wrong magic, version, or body size."""


class ParameterError(ValueError):
    """Argument outside its documented domain (negative power, bad shape, ...)."""


class NumericError(ArithmeticError):
    """Non-finite input or accumulator overflow during integer arithmetic."""
