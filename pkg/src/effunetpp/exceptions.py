"""Exception types shared across the package."""


class ContractError(ValueError):
    """An input violates a documented shape or value contract."""


class ConfigError(ValueError):
    """Experiment configuration failed validation."""


class DataError(ValueError):
    """Dataset files are missing or malformed."""


class NumericError(RuntimeError):
    """Training produced a non-finite value."""
