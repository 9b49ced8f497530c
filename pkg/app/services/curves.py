"""Roth curve geometry kernel: cyclic basis, curves, hodographs, degree
elevation and arc-length maps.

Control points are indexed j = 1..J (J = 2n + 1) in every public signature and
stored 0-based, so the j-th point lives in ``coords[2(j-1):2(j-1)+2]``.
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.linalg import lstsq
from scipy.optimize import brentq
from scipy.special import gammaln

from app.config import settings
from app.errors import ConfigError, DimensionError, DomainError

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]


def num_points(degree: int) -> int:
    """Number of control points J = 2n + 1"""
    return 2 * degree + 1


@dataclass(frozen=True, eq=False)
class ControlPolygon:
    """Degree-n closed Roth curve stored as a stacked (x, y) coordinate vector"""

    degree: int
    coords: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.degree < 1:
            raise DomainError(f"degree must be >= 1, got {self.degree}")
        coords = np.array(self.coords, dtype=float).ravel()
        expected = 2 * num_points(self.degree)
        if coords.size != expected:
            raise DimensionError(
                f"degree {self.degree} polygon needs {expected} coordinates, got {coords.size}"
            )
        if not np.all(np.isfinite(coords)):
            raise DomainError("control polygon has non-finite coordinates")
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)

    @property
    def num_points(self) -> int:
        return num_points(self.degree)

    @property
    def points(self) -> np.ndarray:
        """Control points as a (J, 2) array"""
        return self.coords.reshape(-1, 2)

    @classmethod
    def from_points(cls, points: np.ndarray) -> "ControlPolygon":
        points = np.asarray(points, dtype=float)
        if points.ndim != 2 or points.shape[1] != 2 or points.shape[0] % 2 == 0:
            raise DimensionError(f"expected an odd number of 2-D points, got shape {points.shape}")
        return cls(degree=(points.shape[0] - 1) // 2, coords=points.ravel())

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ControlPolygon":
        return cls(degree=int(data["degree"]), coords=np.asarray(data["coords"], dtype=float))

    def to_dict(self) -> Dict[str, Any]:
        return {"degree": self.degree, "coords": self.coords.tolist()}

    def translated(self, offset: np.ndarray) -> "ControlPolygon":
        return ControlPolygon.from_points(self.points + np.asarray(offset, dtype=float))


def basis_scale(n: int) -> float:
    """h_n / 2^n with h_n = (2^n n!)^2 / (2n+1)!, evaluated in log space"""
    log_h = 2.0 * (n * np.log(2.0) + gammaln(n + 1)) - gammaln(2 * n + 2)
    return float(np.exp(log_h - n * np.log(2.0)))


def _phases(n: int) -> np.ndarray:
    J = num_points(n)
    return 2.0 * np.pi * np.arange(J) / J


def influence_points(n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Parameters where each basis function peaks (q_j) and where it vanishes"""
    phases = _phases(n)
    peaks = -phases
    vanish = np.pi - phases
    return peaks, vanish


def basis_weight(n: int, j: int, t: float) -> float:
    """B_j^n(t) for 1-based j"""
    if n < 1:
        raise DomainError(f"degree must be >= 1, got {n}")
    J = num_points(n)
    if not 1 <= j <= J:
        raise IndexError(f"basis index j={j} outside 1..{J}")
    base = 1.0 + np.cos(t + 2.0 * np.pi * (j - 1) / J)
    return float(basis_scale(n) * base**n)


def basis_matrix(n: int, t: ArrayLike) -> np.ndarray:
    """(len(t), J) matrix of basis weights"""
    if n < 1:
        raise DomainError(f"degree must be >= 1, got {n}")
    t = np.atleast_1d(np.asarray(t, dtype=float))
    base = 1.0 + np.cos(t[:, None] + _phases(n)[None, :])
    # cos can overshoot -1 by an ulp
    base = np.clip(base, 0.0, 2.0)
    return basis_scale(n) * base**n


def _derivative_weights(n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Frequencies n-k and coefficients C(2n,k)(n-k)/C(2n,n) of the hodograph series"""
    k = np.arange(n)
    log_ratio = gammaln(n + 1) + gammaln(n + 1) - gammaln(k + 1) - gammaln(2 * n - k + 1)
    freqs = (n - k).astype(float)
    return freqs, np.exp(log_ratio) * freqs


def basis_derivative_matrix(n: int, t: ArrayLike) -> np.ndarray:
    """(len(t), J) matrix of dB_j/dt from the finite trigonometric series"""
    if n < 1:
        raise DomainError(f"degree must be >= 1, got {n}")
    t = np.atleast_1d(np.asarray(t, dtype=float))
    J = num_points(n)
    freqs, coef = _derivative_weights(n)
    angle = t[:, None, None] + _phases(n)[None, :, None]
    series = np.sin(freqs[None, None, :] * angle) @ coef
    return -2.0 / J * series


def design_matrix(n: int, t: ArrayLike) -> np.ndarray:
    """Stacked 2N x 2J matrix whose i-th row pair is X(t_i)"""
    return np.kron(basis_matrix(n, t), np.eye(2))


def hodograph_rows(n: int, t: float) -> Tuple[np.ndarray, np.ndarray]:
    """Row vectors Xdot_x(t), Xdot_y(t) such that H(t) = (Xdot_x c, Xdot_y c)"""
    rows = np.kron(basis_derivative_matrix(n, t), np.eye(2))
    return rows[0], rows[1]


def curve_points(c: ControlPolygon, t: ArrayLike) -> np.ndarray:
    """Curve evaluated at every parameter, shape (len(t), 2)"""
    return basis_matrix(c.degree, t) @ c.points


def curve_point(c: ControlPolygon, t: float) -> np.ndarray:
    return curve_points(c, t)[0]


def hodograph_points(c: ControlPolygon, t: ArrayLike) -> np.ndarray:
    return basis_derivative_matrix(c.degree, t) @ c.points


def hodograph_point(c: ControlPolygon, t: float) -> np.ndarray:
    return hodograph_points(c, t)[0]


def elevation_matrix(n: int, v: int) -> np.ndarray:
    """Stacked 2(2(n+v)+1) x 2(2n+1) degree-elevation operator"""
    if n < 1:
        raise DomainError(f"degree must be >= 1, got {n}")
    if v < 0:
        raise DomainError(f"elevation step must be >= 0, got {v}")
    J = num_points(n)
    if v == 0:
        return np.eye(2 * J)

    N = n + v
    J_new = num_points(N)
    k = np.arange(n)
    # C(2n,k) C(2N,N) / (C(2n,n) C(2N,v+k))
    log_coef = (
        gammaln(2 * n + 1) - gammaln(k + 1) - gammaln(2 * n - k + 1)
        + gammaln(2 * N + 1) - 2.0 * gammaln(N + 1)
        - gammaln(2 * n + 1) + 2.0 * gammaln(n + 1)
        - gammaln(2 * N + 1) + gammaln(v + k + 1) + gammaln(2 * N - v - k + 1)
    )
    coef = 2.0 / J * np.exp(log_coef)
    freqs = (n - k).astype(float)

    psi = 2.0 * np.pi * np.arange(J_new) / J_new
    phi = _phases(n)
    angle = phi[None, :, None] - psi[:, None, None]
    scalar = 1.0 / J + np.cos(freqs[None, None, :] * angle) @ coef
    return np.kron(scalar, np.eye(2))


def elevate(c: ControlPolygon, v: int) -> ControlPolygon:
    """Re-express the curve with degree n + v"""
    E = elevation_matrix(c.degree, v)
    return ControlPolygon(degree=c.degree + v, coords=E @ c.coords)


def sample_curve(c: ControlPolygon, count: int) -> np.ndarray:
    """(count, 3) table of (t, x, y) on a uniform grid over [-pi, pi)"""
    if count < 1:
        raise DomainError(f"sample count must be >= 1, got {count}")
    t = np.linspace(-np.pi, np.pi, count, endpoint=False)
    return np.column_stack([t, curve_points(c, t)])


def fit_polygon_least_squares(points: np.ndarray, t: np.ndarray, degree: int) -> ControlPolygon:
    """Least-squares projection of curve samples onto the degree-n Roth basis"""
    points = np.asarray(points, dtype=float)
    t = np.asarray(t, dtype=float)
    if points.shape != (t.size, 2):
        raise DimensionError(f"points {points.shape} do not match {t.size} parameters")
    coef, *_ = lstsq(basis_matrix(degree, t), points)
    return ControlPolygon.from_points(coef)


class ArcLengthMap:
    """Cumulative arc length A(u) of a Roth curve on a uniform trapezoid table.

    Between table nodes the speed is interpolated linearly, which is exactly
    what the trapezoid rule integrates, so A is continuous and nondecreasing.
    """

    def __init__(self, polygon: ControlPolygon, nodes: Optional[int] = None):
        self.polygon = polygon
        self.nodes = settings.quadrature_nodes if nodes is None else int(nodes)
        if self.nodes < 2:
            raise ConfigError(f"quadrature resolution must be >= 2, got {self.nodes}", field="nodes")

        self.grid = np.linspace(-np.pi, np.pi, self.nodes)
        self.step = self.grid[1] - self.grid[0]
        self.speeds = np.linalg.norm(hodograph_points(polygon, self.grid), axis=1)
        self.table = cumulative_trapezoid(self.speeds, self.grid, initial=0.0)

    @property
    def total_length(self) -> float:
        return float(self.table[-1])

    def _cell(self, u: float) -> int:
        k = int(np.searchsorted(self.grid, u, side="right")) - 1
        return min(max(k, 0), self.nodes - 2)

    def _value(self, u: float) -> float:
        k = self._cell(u)
        delta = u - self.grid[k]
        slope = (self.speeds[k + 1] - self.speeds[k]) / self.step
        return float(self.table[k] + self.speeds[k] * delta + 0.5 * slope * delta**2)

    def arc_length(self, u: ArrayLike) -> ArrayLike:
        """A(u) = integral of |H| from -pi to u"""
        values = np.atleast_1d(np.asarray(u, dtype=float))
        if np.any(values < -np.pi) or np.any(values > np.pi):
            raise DomainError("arc length parameter outside [-pi, pi]")
        out = np.array([self._value(x) for x in values])
        return float(out[0]) if np.ndim(u) == 0 else out

    def arc_length_inverse(self, length: ArrayLike) -> ArrayLike:
        """Parameter t with A(t) = length"""
        values = np.atleast_1d(np.asarray(length, dtype=float))
        L = self.total_length
        if np.any(values < 0.0) or np.any(values > L):
            raise DomainError(f"arc length outside [0, {L:.6g}]")
        out = np.array([self._invert(x) for x in values])
        return float(out[0]) if np.ndim(length) == 0 else out

    def _invert(self, length: float) -> float:
        if length <= 0.0:
            return -np.pi
        if length >= self.total_length:
            return np.pi
        k = int(np.searchsorted(self.table, length, side="right")) - 1
        k = min(max(k, 0), self.nodes - 2)
        lo, hi = self.grid[k], self.grid[k + 1]
        if self.table[k] == length:
            return float(lo)
        # table[k] < length < table[k+1], so the bracket always changes sign
        return float(brentq(lambda u: self._value(u) - length, lo, hi, xtol=1e-14, maxiter=200))


def arc_length(arc_map: ArcLengthMap, u: ArrayLike) -> ArrayLike:
    return arc_map.arc_length(u)


def arc_length_inverse(arc_map: ArcLengthMap, length: ArrayLike) -> ArrayLike:
    return arc_map.arc_length_inverse(length)


def total_length(c: ControlPolygon, nodes: Optional[int] = None) -> float:
    return ArcLengthMap(c, nodes).total_length
