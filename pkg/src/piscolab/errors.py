"""Error taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, MissingArtifactError
-> 3, NumericError -> 4. Everything else is a plain crash.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class MissingArtifactError(FileNotFoundError):
    """A required input file (checkpoint, log, dataset) does not exist."""


class NumericError(ArithmeticError):
    """Training or analysis math left the finite range."""


class SchemaError(ValueError):
    """A serialized artifact does not match its declared layout."""
