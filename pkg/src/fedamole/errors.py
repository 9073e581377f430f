"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value is invalid.

    ``key`` holds the dotted path of the offending entry when known.
    """

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message if key is None else f"{key}: {message}")
        self.key = key


class FeasibilityError(ConfigError):
    """Assignment constraints admit no solution."""


class ProtocolError(RuntimeError):
    """A federated round received inconsistent or missing uploads."""
