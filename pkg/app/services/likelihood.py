"""Point and tangent-orientation likelihoods of a Roth curve.

The orientation term integrates out the unknown tangent magnitude. Writing
its closed form with (sin theta, cos theta) instead of tan theta gives

    log l_i = -1/2 log(2 pi tau^2) + log|cos theta_i| - s_i^2 / (2 tau^2),
    s_i = Hx(t_i) sin theta_i - Hy(t_i) cos theta_i,

so the exponent is the quadratic form c' W c with W = sum_i w_i w_i' and
w_i = sin theta_i Xdot_x(t_i) - cos theta_i Xdot_y(t_i).
"""
import logging

import numpy as np

from app.errors import DimensionError, DomainError
from app.services.curves import ControlPolygon, basis_derivative_matrix, basis_matrix

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))


def _check_points(points: np.ndarray, t: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    if points.shape[0] != np.size(t):
        raise DimensionError(f"{points.shape[0]} points but {np.size(t)} parameters")
    return points


def point_residuals(c: ControlPolygon, points: np.ndarray, t: np.ndarray) -> np.ndarray:
    """p_i - X(t_i) c as an (N, 2) array"""
    points = _check_points(points, t)
    return points - basis_matrix(c.degree, t) @ c.points


def loglik_points(c: ControlPolygon, points: np.ndarray, t: np.ndarray, tau_p: float) -> float:
    """sum_i log N_2(p_i; X(t_i) c, tau_p^-1 I_2)"""
    if not tau_p > 0:
        raise DomainError(f"point precision must be positive, got {tau_p}")
    residuals = point_residuals(c, points, t)
    n = residuals.shape[0]
    return float(n * (np.log(tau_p) - LOG_2PI) - 0.5 * tau_p * np.sum(residuals**2))


def hodograph_design(degree: int, t: np.ndarray):
    """(N, 2J) row stacks Xdot_x(t_i) and Xdot_y(t_i)"""
    D = basis_derivative_matrix(degree, t)
    return np.kron(D, [[1.0, 0.0]]), np.kron(D, [[0.0, 1.0]])


def orientation_rows(degree: int, t: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """(N, 2J) rows w_i with s_i = w_i c"""
    theta = np.asarray(theta, dtype=float).ravel()
    if theta.size != np.size(t):
        raise DimensionError(f"{theta.size} angles but {np.size(t)} parameters")
    rows_x, rows_y = hodograph_design(degree, t)
    return np.sin(theta)[:, None] * rows_x - np.cos(theta)[:, None] * rows_y


def orientation_precision(degree: int, t: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """W = sum_i w_i w_i', so the orientation exponent is -c'Wc / (2 tau^2)"""
    rows = orientation_rows(degree, t, theta)
    return rows.T @ rows


def orientation_residuals(c: ControlPolygon, t: np.ndarray, theta: np.ndarray) -> np.ndarray:
    return orientation_rows(c.degree, t, theta) @ c.coords


def orientation_terms(c: ControlPolygon, t: np.ndarray, theta: np.ndarray, tau2: float) -> np.ndarray:
    """Per-point log marginal likelihood of the observed tangent angles"""
    if not tau2 > 0:
        raise DomainError(f"orientation variance must be positive, got {tau2}")
    theta = np.asarray(theta, dtype=float).ravel()
    s = orientation_residuals(c, t, theta)
    with np.errstate(divide="ignore"):
        log_cos = np.log(np.abs(np.cos(theta)))
    return -0.5 * (LOG_2PI + np.log(tau2)) + log_cos - 0.5 * s**2 / tau2


def loglik_orientations(c: ControlPolygon, t: np.ndarray, theta: np.ndarray, tau2: float) -> float:
    return float(np.sum(orientation_terms(c, t, theta, tau2)))
