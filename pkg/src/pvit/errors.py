"""Shared exception types. One class per failure family so callers can filter."""


class ConfigError(ValueError):
    """Invalid configuration value (bad temperature, unknown key, out-of-range setting)."""


class ContractViolation(ValueError):
    """Caller broke a documented precondition (shape mismatch, bad label, empty batch)."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class FormatError(ValueError):
    """Malformed binary payload (image codec, checkpoint container)."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ManifestError(ValueError):
    """Malformed manifest CSV."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)
        self.line = line
