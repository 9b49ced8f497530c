"""Exception hierarchy shared by services, routers and the CLI"""
from typing import Optional


class ShapeModelError(Exception):
    """Base class for every error raised by RothFit"""


class ConfigError(ShapeModelError, ValueError):
    """Invalid configuration, spec file or prior setting"""

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        if field:
            message = f"{field}: {message}"
        super().__init__(message)


class DomainError(ShapeModelError, ValueError):
    """Argument outside the domain of an operation"""


class DimensionError(ShapeModelError, ValueError):
    """Stacked vectors or matrices with mismatched sizes"""


class DegenerateTangentError(DomainError):
    """Hodograph vanishes at an influence point"""

    def __init__(self, j: int, speed: float):
        self.j = j
        self.speed = speed
        super().__init__(f"degenerate tangent at control point j={j} (|H|={speed:.3e})")


class ImageFormatError(ShapeModelError, ValueError):
    """Unreadable or unsupported raster"""


class NumericalError(ShapeModelError, ArithmeticError):
    """Linear algebra failure that survived the jitter retry"""
