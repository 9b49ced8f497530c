"""Deformation-orienting rotation blocks and control-polygon deformation"""
import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.linalg import block_diag

from app.config import settings
from app.errors import DegenerateTangentError, DimensionError, DomainError
from app.services.curves import (
    ControlPolygon,
    basis_derivative_matrix,
    hodograph_points,
    influence_points,
    num_points,
)

logger = logging.getLogger(__name__)

FALLBACK_GRID = 2048


def rotation(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True, eq=False)
class OrientingBlock:
    """Block-diagonal T = block(R_1, ..., R_J)"""

    blocks: np.ndarray = field(repr=False)
    exact: bool = True
    length: Optional[float] = None

    @property
    def num_points(self) -> int:
        return self.blocks.shape[0]

    @property
    def matrix(self) -> np.ndarray:
        return block_diag(*self.blocks)

    def apply(self, d: np.ndarray) -> np.ndarray:
        d = np.asarray(d, dtype=float)
        if d.size != 2 * self.num_points:
            raise DimensionError(
                f"deformation of length {d.size} does not match {self.num_points} blocks"
            )
        return np.einsum("jab,jb->ja", self.blocks, d.reshape(-1, 2)).ravel()


def _influence_hodograph_rows(n: int) -> Tuple[np.ndarray, np.ndarray]:
    """(J, 2J) rows Xdot_x(q_j), Xdot_y(q_j) for every influence point"""
    q, _ = influence_points(n)
    D = basis_derivative_matrix(n, q)
    return np.kron(D, [[1.0, 0.0]]), np.kron(D, [[0.0, 1.0]])


def tangent_angle(c: ControlPolygon, j: int, tolerance: float = None) -> float:
    """Quadrant-aware angle of the hodograph at q_j (1-based j)"""
    J = c.num_points
    if not 1 <= j <= J:
        raise IndexError(f"control point index j={j} outside 1..{J}")
    tolerance = settings.tangent_tolerance if tolerance is None else tolerance
    q, _ = influence_points(c.degree)
    hx, hy = hodograph_points(c, q[j - 1])[0]
    speed = float(np.hypot(hx, hy))
    if speed < tolerance:
        raise DegenerateTangentError(j, speed)
    return float(np.arctan2(hy, hx))


def _fallback_angle(c: ControlPolygon, q_j: float, tolerance: float) -> float:
    grid = np.linspace(-np.pi, np.pi, FALLBACK_GRID, endpoint=False)
    H = hodograph_points(c, grid)
    speed = np.linalg.norm(H, axis=1)
    usable = np.flatnonzero(speed >= tolerance)
    if usable.size == 0:
        return 0.0
    gap = np.abs(np.angle(np.exp(1j * (grid[usable] - q_j))))
    nearest = usable[np.argmin(gap)]
    return float(np.arctan2(H[nearest, 1], H[nearest, 0]))


def tangent_angles(c: ControlPolygon, strict: bool = True, tolerance: float = None) -> np.ndarray:
    """Tangent angles at every influence point, with optional degenerate fallback"""
    tolerance = settings.tangent_tolerance if tolerance is None else tolerance
    q, _ = influence_points(c.degree)
    H = hodograph_points(c, q)
    speeds = np.hypot(H[:, 0], H[:, 1])
    angles = np.arctan2(H[:, 1], H[:, 0])
    for idx in np.flatnonzero(speeds < tolerance):
        if strict:
            raise DegenerateTangentError(int(idx) + 1, float(speeds[idx]))
        angles[idx] = _fallback_angle(c, q[idx], tolerance)
        logger.warning(
            "Degenerate tangent at j=%d (|H|=%.2e); using nearest usable direction %.4f",
            idx + 1, speeds[idx], angles[idx],
        )
    return angles


def orienting_block_exact(c: ControlPolygon, strict: bool = True) -> OrientingBlock:
    """Exact rotation blocks R_j(theta_j)"""
    angles = tangent_angles(c, strict=strict)
    cos, sin = np.cos(angles), np.sin(angles)
    blocks = np.stack([np.stack([cos, -sin], axis=-1), np.stack([sin, cos], axis=-1)], axis=1)
    return OrientingBlock(blocks=blocks, exact=True)


def orienting_block_approx(c: ControlPolygon, length: float) -> OrientingBlock:
    """Blocks linear in c: (2 pi / L_A) [[Hx, -Hy], [Hy, Hx]] at each q_j"""
    if not length > 0:
        raise DomainError(f"approximate curve length must be positive, got {length}")
    rows_x, rows_y = _influence_hodograph_rows(c.degree)
    hx, hy = rows_x @ c.coords, rows_y @ c.coords
    scale = 2.0 * np.pi / length
    blocks = scale * np.stack([np.stack([hx, -hy], axis=-1), np.stack([hy, hx], axis=-1)], axis=1)
    return OrientingBlock(blocks=blocks, exact=False, length=float(length))


def approx_deformation_operator(degree: int, d: np.ndarray, length: float) -> np.ndarray:
    """Matrix G with orienting_block_approx(x, L_A).apply(d) == G @ x.coords"""
    if not length > 0:
        raise DomainError(f"approximate curve length must be positive, got {length}")
    J = num_points(degree)
    d = np.asarray(d, dtype=float).reshape(-1, 2)
    if d.shape[0] != J:
        raise DimensionError(f"deformation has {d.shape[0]} points, degree {degree} needs {J}")
    rows_x, rows_y = _influence_hodograph_rows(degree)
    G = np.empty((2 * J, 2 * J))
    G[0::2] = d[:, :1] * rows_x - d[:, 1:] * rows_y
    G[1::2] = d[:, :1] * rows_y + d[:, 1:] * rows_x
    return 2.0 * np.pi / length * G


def apply_deformation(c: ControlPolygon, d: np.ndarray, block: OrientingBlock) -> ControlPolygon:
    """c~ = c + T d"""
    if block.num_points != c.num_points:
        raise DimensionError(
            f"orienting block has {block.num_points} points, polygon has {c.num_points}"
        )
    return ControlPolygon(degree=c.degree, coords=c.coords + block.apply(d))
