"""Exception types raised across the package."""


class WeatherSegError(Exception):
    """Base class for all package errors."""


class ConfigError(WeatherSegError, ValueError):
    pass


class ShapeError(WeatherSegError, ValueError):
    pass


class InvalidDepthError(WeatherSegError, ValueError):
    pass


class SequenceTooShortError(WeatherSegError, ValueError):
    pass


class EmptyPoolError(WeatherSegError, ValueError):
    pass


class ConsistencyError(WeatherSegError, ValueError):
    pass


class IngestionError(WeatherSegError):
    pass


class ContractError(WeatherSegError, ValueError):
    """A caller violated a documented precondition."""


class DivergenceError(WeatherSegError, FloatingPointError):
    """Non-finite values appeared during unrolling or training."""

    def __init__(self, message, layer=None, snapshot=None):
        super().__init__(message)
        self.layer = layer
        self.snapshot = snapshot or {}


class NoDataError(WeatherSegError, ValueError):
    pass


class VersionError(WeatherSegError):
    pass
