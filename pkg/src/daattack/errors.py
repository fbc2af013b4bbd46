"""Exception types shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataFormatError -> 3, TrainingError and numeric failures -> 4.
"""


class ConfigError(ValueError):
    """Invalid configuration value, flag combination, or config file."""


class ShapeError(ValueError):
    """Operands with incompatible array shapes."""


class DataFormatError(Exception):
    """Unreadable or inconsistent on-disk artifact."""


class BadMagicError(DataFormatError):
    """File does not start with the expected magic bytes."""


class FormatVersionError(DataFormatError):
    """File uses an unsupported format version."""

    def __init__(self, found, expected):
        super().__init__(f"unsupported format version {found}, expected {expected}")
        self.found = found
        self.expected = expected


class TruncatedFileError(DataFormatError):
    """File ends before the declared payload."""

    def __init__(self, expected, actual):
        super().__init__(f"truncated file: expected {expected} bytes, got {actual}")
        self.expected = expected
        self.actual = actual


class TrainingError(RuntimeError):
    """Training diverged or produced non-finite values."""
