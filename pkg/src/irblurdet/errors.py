"""Exception types shared across the package."""


class InvalidParameterError(ValueError):
    """An argument violates an operation's precondition."""


class ConfigError(ValueError):
    """A configuration file or option is malformed or inconsistent."""


class GenerationError(RuntimeError):
    """Synthetic data generation could not satisfy its constraints."""
