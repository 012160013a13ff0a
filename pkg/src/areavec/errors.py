"""Exception types shared across the package."""


class AreavecError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(AreavecError):
    """A parameter, flag, or configuration value is invalid."""


class DataError(AreavecError):
    """Input data is malformed, empty, or inconsistent."""


class ParseError(DataError):
    """A file could not be parsed; carries the offending location."""

    def __init__(self, message: str, path=None, line: int | None = None):
        loc = ""
        if path is not None:
            loc += f"{path}"
        if line is not None:
            loc += f":{line}"
        super().__init__(f"{loc}: {message}" if loc else message)
        self.path = path
        self.line = line


class UnsupportedRegionError(DataError):
    """Coordinates fall outside the supported mesh bands."""


class DivergenceError(AreavecError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, learning_rate: float):
        super().__init__(
            f"non-finite loss at epoch {epoch} (learning rate {learning_rate})"
        )
        self.epoch = epoch
        self.learning_rate = learning_rate
