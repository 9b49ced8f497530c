from typing import Union

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import directed_hausdorff

from app.errors import DimensionError, DomainError
from app.services.curves import ControlPolygon, sample_curve

CurveLike = Union[ControlPolygon, np.ndarray]

DEFAULT_SAMPLES = 1024


def _samples(curve: CurveLike, count: int) -> np.ndarray:
    if isinstance(curve, ControlPolygon):
        return sample_curve(curve, count)[:, 1:]
    points = np.asarray(curve, dtype=float)
    if points.ndim != 2 or points.shape[1] != 2:
        raise DimensionError(f"expected (M, 2) curve samples, got shape {points.shape}")
    return points


def hausdorff_distance(curve_a: CurveLike, curve_b: CurveLike, samples: int = DEFAULT_SAMPLES) -> float:
    a, b = _samples(curve_a, samples), _samples(curve_b, samples)
    return float(max(directed_hausdorff(a, b)[0], directed_hausdorff(b, a)[0]))


def _aligned_rms(a: np.ndarray, b: np.ndarray) -> float:
    """RMS distance after the best rotation and translation of b onto a"""
    a0, b0 = a - a.mean(axis=0), b - b.mean(axis=0)
    u, _, vt = np.linalg.svd(b0.T @ a0)
    flip = np.sign(np.linalg.det(u @ vt)) or 1.0
    rotation = u @ np.diag([1.0, flip]) @ vt
    return float(np.sqrt(np.mean(np.sum((b0 @ rotation - a0) ** 2, axis=1))))


def procrustes_distance(curve_a: CurveLike, curve_b: CurveLike, samples: int = 256) -> float:
    """Rotation and translation aligned RMS distance, minimized over cyclic shifts"""
    a, b = _samples(curve_a, samples), _samples(curve_b, samples)
    if a.shape != b.shape:
        raise DimensionError(f"curves have {a.shape[0]} and {b.shape[0]} samples")
    return min(_aligned_rms(a, np.roll(b, shift, axis=0)) for shift in range(b.shape[0]))


def classify_fit(distance: float, sigma: float) -> str:
    if not sigma > 0:
        raise DomainError(f"noise scale must be positive, got {sigma}")
    ratio = distance / sigma
    if ratio <= 1.0:
        return "excellent"
    if ratio <= 2.0:
        return "good"
    if ratio <= 3.0:
        return "fair"
    return "poor"


def point_distances(curve: CurveLike, points: np.ndarray, samples: int = DEFAULT_SAMPLES) -> np.ndarray:
    """Distance from every point to the nearest curve sample"""
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    if points.shape[0] == 0:
        return np.zeros(0)
    distances, _ = cKDTree(_samples(curve, samples)).query(points)
    return distances


def rms_point_distance(curve: CurveLike, points: np.ndarray, samples: int = DEFAULT_SAMPLES) -> float:
    distances = point_distances(curve, points, samples)
    return float(np.sqrt(np.mean(distances**2))) if distances.size else 0.0
