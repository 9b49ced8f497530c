"""Shared fixtures: circles, point clouds, rasters and small shape specs"""
from typing import Callable, Optional, Tuple

import numpy as np
import pytest

from app.services.curves import ControlPolygon
from app.services.images import GrayImage
from app.services.inference import PriorConfig, ShapeObservations
from app.services.shape_process import ShapeProcessSpec
from app.storage import Storage


def _circle(radius: float, center: Tuple[float, float] = (0.0, 0.0)) -> ControlPolygon:
    # degree-1 control points at distance 2r trace the circle of radius r
    phi = 2.0 * np.pi * np.arange(3) / 3.0
    points = 2.0 * radius * np.column_stack([np.cos(phi), np.sin(phi)]) + np.asarray(center)
    return ControlPolygon.from_points(points)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240917)


@pytest.fixture
def make_circle() -> Callable[..., ControlPolygon]:
    return _circle


@pytest.fixture
def circle_points() -> Callable[..., np.ndarray]:
    def build(
        radius: float,
        count: int,
        center: Tuple[float, float] = (0.0, 0.0),
        noise: float = 0.0,
        rng: Optional[np.random.Generator] = None,
    ) -> np.ndarray:
        s = np.linspace(-np.pi, np.pi, count, endpoint=False)
        points = radius * np.column_stack([np.cos(s), np.sin(s)]) + np.asarray(center)
        if noise > 0:
            points = points + noise * (rng or np.random.default_rng(0)).standard_normal(points.shape)
        return points

    return build


@pytest.fixture
def two_level_spec() -> ShapeProcessSpec:
    """Degrees (1, 3) with a broad initial ellipse and small refinements"""
    return ShapeProcessSpec.isotropic(
        degrees=(1, 3),
        variances=(4.0, 0.01),
        mu0=np.tile([0.0, 2.0], 3),
        sigma_m=100.0 * np.eye(2),
    )


@pytest.fixture
def two_level_prior(two_level_spec: ShapeProcessSpec) -> PriorConfig:
    return PriorConfig(spec=two_level_spec)


@pytest.fixture
def circle_obs(circle_points) -> ShapeObservations:
    return ShapeObservations(points=circle_points(1.0, 24, center=(0.5, -0.25), noise=0.02))


@pytest.fixture
def disk_image() -> Callable[..., GrayImage]:
    def build(size: int = 128, radius: float = 30.0, smooth: float = 0.0) -> GrayImage:
        rows, cols = np.mgrid[0:size, 0:size]
        r = np.hypot(rows - size / 2, cols - size / 2)
        if smooth > 0:
            pixels = 1.0 / (1.0 + np.exp((r - radius) / smooth))
        else:
            pixels = (r <= radius).astype(float)
        return GrayImage(pixels=255.0 * pixels)

    return build


@pytest.fixture
def tmp_storage(tmp_path) -> Storage:
    return Storage(root=tmp_path)
