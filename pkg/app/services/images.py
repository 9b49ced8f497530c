"""Grayscale raster ingestion: discrete gradients, thresholding and oriented
point-cloud extraction.

Pixel (row, col) maps to the point (col, Y - 1 - row), so image space shares
the y-up handedness of curve space.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import uniform_filter

from app.errors import DimensionError, DomainError

logger = logging.getLogger(__name__)


def wrap_angle(angle: np.ndarray) -> np.ndarray:
    """Wrap into (-pi, pi]"""
    wrapped = np.mod(np.asarray(angle, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    return np.where(wrapped == -np.pi, np.pi, wrapped)


@dataclass(frozen=True, eq=False)
class GrayImage:
    """Row-major intensities, height Y rows by width X columns"""

    pixels: np.ndarray = field(repr=False)

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=float)
        if pixels.ndim != 2:
            raise DimensionError(f"expected a 2-D raster, got {pixels.ndim} dimensions")
        if pixels.shape[0] < 2 or pixels.shape[1] < 2:
            raise DomainError(f"raster must be at least 2x2, got {pixels.shape[1]}x{pixels.shape[0]}")
        if not np.all(np.isfinite(pixels)):
            raise DomainError("raster has non-finite intensities")
        object.__setattr__(self, "pixels", pixels)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True, eq=False)
class GradientField:
    """Per-pixel gradients in y-up coordinates and their norms"""

    gx: np.ndarray = field(repr=False)
    gy: np.ndarray = field(repr=False)

    @property
    def norm(self) -> np.ndarray:
        return np.hypot(self.gx, self.gy)


@dataclass(frozen=True, eq=False)
class OrientedPointCloud:
    """Points with optional gradient angles omega and tangent angles theta"""

    points: np.ndarray = field(repr=False)
    omega: Optional[np.ndarray] = field(default=None, repr=False)
    theta: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        object.__setattr__(self, "points", points)
        for name in ("omega", "theta"):
            value = getattr(self, name)
            if value is not None:
                value = np.asarray(value, dtype=float).ravel()
                if value.size != points.shape[0]:
                    raise DimensionError(f"{name} has {value.size} entries for {points.shape[0]} points")
                object.__setattr__(self, name, value)
        if self.omega is not None and self.theta is None:
            object.__setattr__(self, "theta", wrap_angle(self.omega + np.pi / 2.0))

    @property
    def count(self) -> int:
        return self.points.shape[0]

    @property
    def has_angles(self) -> bool:
        return self.theta is not None


def gradient_field(image: GrayImage, blur: bool = False) -> GradientField:
    """Central differences in the interior, one-sided at the borders"""
    z = uniform_filter(image.pixels, size=3, mode="nearest") if blur else image.pixels
    d_row, d_col = np.gradient(z)
    # rows grow downward, curve y grows upward
    return GradientField(gx=d_col, gy=-d_row)


def default_threshold(gradients: GradientField) -> float:
    return 0.5 * float(gradients.norm.max())


def extract_cloud(gradients: GradientField, threshold: Optional[float] = None) -> OrientedPointCloud:
    """Every pixel whose gradient norm exceeds the threshold becomes a point"""
    if threshold is None:
        threshold = default_threshold(gradients)
        if threshold <= 0:
            logger.warning("Flat raster: gradient norm is zero everywhere")
            return OrientedPointCloud(points=np.empty((0, 2)), omega=np.empty(0), theta=np.empty(0))
    if not threshold > 0:
        raise DomainError(f"threshold must be positive, got {threshold}")

    rows, cols = np.nonzero(gradients.norm > threshold)
    height = gradients.gx.shape[0]
    points = np.column_stack([cols, height - 1 - rows]).astype(float)
    gx, gy = gradients.gx[rows, cols], gradients.gy[rows, cols]
    omega = np.arctan2(gy, gx)
    return OrientedPointCloud(points=points, omega=omega, theta=wrap_angle(omega + np.pi / 2.0))


def threshold_sweep(gradients: GradientField, fractions=(0.3, 0.5, 0.7)) -> dict:
    """Extracted-point counts at fractions of the maximum gradient norm"""
    peak = float(gradients.norm.max())
    if peak <= 0:
        return {f"{f:.2f}": 0 for f in fractions}
    return {f"{f:.2f}": extract_cloud(gradients, f * peak).count for f in fractions}
