"""Exception types shared across the package."""


class ClueError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(ClueError, ValueError):
    """A configuration value is out of its documented range.

    ``field`` names the offending key so callers can report a path.
    """

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class DimensionError(ClueError, ValueError):
    pass


class OrderingError(ClueError, ValueError):
    pass


class ConditioningError(ClueError, KeyError):
    def __str__(self) -> str:  # KeyError repr-quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class NumericError(ClueError, ArithmeticError):
    pass


class ApertureNotFound(ClueError):
    def __init__(self, message: str = "no aperture found"):
        super().__init__(message)
