"""Random multiscale shape process: repeated degree elevation followed by
oriented random deformation, plus central shapes and symmetry covariances.
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import eigh

from app.config import settings
from app.errors import ConfigError, DimensionError
from app.services.curves import ControlPolygon, elevation_matrix, num_points
from app.services.deformation import (
    OrientingBlock,
    apply_deformation,
    orienting_block_exact,
    rotation,
)

logger = logging.getLogger(__name__)

SeedLike = Union[int, np.random.Generator, None]


def default_degrees(R: int) -> Tuple[int, ...]:
    """Doubling schedule n_r = 2^(r+1) - 1"""
    return tuple(2 ** (r + 1) - 1 for r in range(R + 1))


def spectral_factor(sigma: np.ndarray, clamp: float = None) -> np.ndarray:
    """F with F F' = sigma, dropping eigen-directions below the clamp"""
    clamp = settings.eigen_clamp if clamp is None else clamp
    sigma = np.asarray(sigma, dtype=float)
    values, vectors = eigh(0.5 * (sigma + sigma.T))
    keep = values > clamp
    return vectors[:, keep] * np.sqrt(values[keep])


def check_covariance(sigma: np.ndarray, size: int, name: str) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (size, size):
        raise ConfigError(f"expected a {size}x{size} covariance, got {sigma.shape}", field=name)
    if not np.all(np.isfinite(sigma)):
        raise ConfigError("covariance has non-finite entries", field=name)
    if not np.allclose(sigma, sigma.T, atol=1e-10 * max(1.0, np.abs(sigma).max())):
        raise ConfigError("covariance is not symmetric", field=name)
    smallest = float(np.linalg.eigvalsh(0.5 * (sigma + sigma.T)).min())
    if smallest < -1e-9 * max(1.0, np.abs(sigma).max()):
        raise ConfigError(f"covariance is not positive semi-definite (eigenvalue {smallest:.3e})", field=name)
    return sigma


@dataclass(frozen=True, eq=False)
class ShapeProcessSpec:
    """Parameters of the random shape process, levels r = 0..R"""

    degrees: Tuple[int, ...]
    mu: Tuple[np.ndarray, ...] = field(repr=False)
    sigma: Tuple[np.ndarray, ...] = field(repr=False)
    mu_m: np.ndarray = field(default_factory=lambda: np.zeros(2), repr=False)
    sigma_m: np.ndarray = field(default_factory=lambda: np.zeros((2, 2)), repr=False)

    def __post_init__(self):
        degrees = tuple(int(n) for n in self.degrees)
        if not degrees:
            raise ConfigError("at least one level is required", field="degrees")
        if degrees[0] != 1:
            raise ConfigError(f"the initial curve must have degree 1, got {degrees[0]}", field="degrees")
        if len(degrees) > 1 and degrees[1] < degrees[0]:
            raise ConfigError("degrees must not decrease", field="degrees")
        if any(b <= a for a, b in zip(degrees[1:], degrees[2:])):
            raise ConfigError("degrees must be strictly increasing after level 1", field="degrees")
        if len(self.mu) != len(degrees) or len(self.sigma) != len(degrees):
            raise ConfigError(
                f"expected {len(degrees)} levels of mu and sigma, got {len(self.mu)} and {len(self.sigma)}",
                field="mu",
            )

        mu, sigma = [], []
        for r, n in enumerate(degrees):
            size = 2 * num_points(n)
            mean = np.asarray(self.mu[r], dtype=float).ravel()
            if mean.size != size:
                raise ConfigError(f"level {r} mean needs {size} entries, got {mean.size}", field=f"mu[{r}]")
            mu.append(mean)
            sigma.append(check_covariance(self.sigma[r], size, f"sigma[{r}]"))

        mu_m = np.asarray(self.mu_m, dtype=float).ravel()
        if mu_m.size != 2:
            raise ConfigError(f"center mean must have 2 entries, got {mu_m.size}", field="mu_m")

        object.__setattr__(self, "degrees", degrees)
        object.__setattr__(self, "mu", tuple(mu))
        object.__setattr__(self, "sigma", tuple(sigma))
        object.__setattr__(self, "mu_m", mu_m)
        object.__setattr__(self, "sigma_m", check_covariance(self.sigma_m, 2, "sigma_m"))
        object.__setattr__(self, "_factors", tuple(spectral_factor(s) for s in sigma))
        object.__setattr__(self, "_factor_m", spectral_factor(self.sigma_m))

    @property
    def R(self) -> int:
        return len(self.degrees) - 1

    def num_points(self, r: int) -> int:
        return num_points(self.degrees[r])

    def factor(self, r: int) -> np.ndarray:
        return self._factors[r]

    @property
    def factor_m(self) -> np.ndarray:
        return self._factor_m

    def elevation(self, r: int) -> np.ndarray:
        """E_r lifting degree n_{r-1} to n_r"""
        return elevation_matrix(self.degrees[r - 1], self.degrees[r] - self.degrees[r - 1])

    def with_means(self, mu: Sequence[np.ndarray]) -> "ShapeProcessSpec":
        return ShapeProcessSpec(self.degrees, tuple(mu), self.sigma, self.mu_m, self.sigma_m)

    @classmethod
    def isotropic(
        cls,
        degrees: Sequence[int],
        variances: Sequence[float],
        mu0: Optional[np.ndarray] = None,
        mu_m: Optional[np.ndarray] = None,
        sigma_m: Optional[np.ndarray] = None,
    ) -> "ShapeProcessSpec":
        """Zero means above level 0 and sigma_r = variance_r * I"""
        mu = [np.zeros(2 * num_points(n)) for n in degrees]
        if mu0 is not None:
            mu[0] = np.asarray(mu0, dtype=float)
        sigma = [v * np.eye(2 * num_points(n)) for n, v in zip(degrees, variances)]
        return cls(
            degrees=tuple(degrees),
            mu=tuple(mu),
            sigma=tuple(sigma),
            mu_m=np.zeros(2) if mu_m is None else mu_m,
            sigma_m=np.zeros((2, 2)) if sigma_m is None else sigma_m,
        )


@dataclass(frozen=True, eq=False)
class ShapeTrajectory:
    """Center, per-level deformations and the polygons they produce"""

    m: np.ndarray
    deformations: Tuple[np.ndarray, ...]
    polygons: Tuple[ControlPolygon, ...]

    @property
    def final(self) -> ControlPolygon:
        return self.polygons[-1]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "m": self.m.tolist(),
            "deformations": [d.tolist() for d in self.deformations],
            "polygons": [c.to_dict() for c in self.polygons],
        }


def initial_block() -> OrientingBlock:
    """T_0 = block(R_{2pi/3}, R_{4pi/3}, R_{2pi})"""
    blocks = np.stack([rotation(2.0 * np.pi * j / 3.0) for j in (1, 2, 3)])
    return OrientingBlock(blocks=blocks, exact=True)


def broadcast_matrix(J: int) -> np.ndarray:
    """2J x 2 matrix copying a 2-vector onto every control point"""
    return np.tile(np.eye(2), (J, 1))


def initial_polygon(m: np.ndarray, d0: np.ndarray) -> ControlPolygon:
    """c^(0) = m + T_0 d^(0), a degree-1 ellipse"""
    m = np.asarray(m, dtype=float).ravel()
    d0 = np.asarray(d0, dtype=float).ravel()
    if m.size != 2:
        raise DimensionError(f"center must have 2 entries, got {m.size}")
    if d0.size != 6:
        raise DimensionError(f"initial deformation must have 6 entries, got {d0.size}")
    return ControlPolygon(degree=1, coords=broadcast_matrix(3) @ m + initial_block().apply(d0))


def process_step(
    c_prev: ControlPolygon,
    r: int,
    spec: ShapeProcessSpec,
    d: np.ndarray,
    strict: bool = True,
) -> ControlPolygon:
    """Elevate c^(r-1) to degree n_r, then deform it by d^(r)"""
    if not 1 <= r <= spec.R:
        raise DimensionError(f"level {r} outside 1..{spec.R}")
    if c_prev.degree != spec.degrees[r - 1]:
        raise DimensionError(
            f"level {r} expects a degree-{spec.degrees[r - 1]} polygon, got degree {c_prev.degree}"
        )
    d = np.asarray(d, dtype=float).ravel()
    if d.size != 2 * spec.num_points(r):
        raise DimensionError(f"level {r} deformation needs {2 * spec.num_points(r)} entries, got {d.size}")
    elevated = ControlPolygon(degree=spec.degrees[r], coords=spec.elevation(r) @ c_prev.coords)
    return apply_deformation(elevated, d, orienting_block_exact(elevated, strict=strict))


def trajectory_from_deformations(
    spec: ShapeProcessSpec,
    m: np.ndarray,
    deformations: Sequence[np.ndarray],
    strict: bool = True,
) -> ShapeTrajectory:
    """Fold the exact recursion over given deformations"""
    if len(deformations) != spec.R + 1:
        raise DimensionError(f"expected {spec.R + 1} deformation levels, got {len(deformations)}")
    deformations = tuple(np.asarray(d, dtype=float).ravel() for d in deformations)
    polygons = [initial_polygon(m, deformations[0])]
    for r in range(1, spec.R + 1):
        polygons.append(process_step(polygons[-1], r, spec, deformations[r], strict=strict))
    return ShapeTrajectory(m=np.asarray(m, dtype=float).ravel(), deformations=deformations, polygons=tuple(polygons))


def central_trajectory(spec: ShapeProcessSpec, strict: bool = True) -> ShapeTrajectory:
    return trajectory_from_deformations(spec, spec.mu_m, spec.mu, strict=strict)


def central_shape(spec: ShapeProcessSpec, strict: bool = True) -> ControlPolygon:
    """Deterministic output with every d^(r) = mu_r"""
    return central_trajectory(spec, strict=strict).final


def _generator(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_shape(spec: ShapeProcessSpec, seed: SeedLike = None, strict: bool = False) -> ShapeTrajectory:
    """Draw m ~ N(mu_m, sigma_m) and d^(r) ~ N(mu_r, sigma_r), then fold the recursion"""
    rng = _generator(seed)
    F_m = spec.factor_m
    m = spec.mu_m + F_m @ rng.standard_normal(F_m.shape[1])
    deformations = []
    for r in range(spec.R + 1):
        F = spec.factor(r)
        deformations.append(spec.mu[r] + F @ rng.standard_normal(F.shape[1]))
    return trajectory_from_deformations(spec, m, deformations, strict=strict)


def sample_shapes(spec: ShapeProcessSpec, count: int, seed: int = 0) -> List[ShapeTrajectory]:
    """Independent draws with one child stream per shape"""
    streams = np.random.SeedSequence(seed).spawn(count)
    return [sample_shape(spec, np.random.default_rng(s)) for s in streams]


def reflection_symmetry_cov(
    degree: int,
    pairs: Iterable[Tuple[int, int]],
    base_variance: float,
    mode: str = "literal",
) -> np.ndarray:
    """Rank-deficient covariance tying paired deformation vectors together.

    ``literal`` makes paired 2-vectors identical. ``mirror`` ties the normal
    (y) components, makes the tangential (x) components opposite and pins the
    tangential component of unpaired points, which is what an exact mirror
    image of the polygon requires.
    """
    if mode not in ("literal", "mirror"):
        raise ConfigError(f"unknown symmetry mode {mode!r}", field="mode")
    if base_variance < 0:
        raise ConfigError(f"variance must be non-negative, got {base_variance}", field="base_variance")
    J = num_points(degree)
    pairs = [tuple(int(i) for i in p) for p in pairs]
    if not pairs:
        return base_variance * np.eye(2 * J)

    used = set()
    for a, b in pairs:
        for idx in (a, b):
            if not 1 <= idx <= J:
                raise ConfigError(f"index {idx} outside 1..{J}", field="pairs")
            if idx in used:
                raise ConfigError(f"index {idx} appears in more than one pair", field="pairs")
            used.add(idx)
        if a == b:
            raise ConfigError(f"index {a} is paired with itself", field="pairs")

    tied = np.array([[1.0, 1.0], [1.0, 1.0]])
    opposed = np.array([[1.0, -1.0], [-1.0, 1.0]])
    sigma = np.zeros((2 * J, 2 * J))
    for a, b in pairs:
        xs = [2 * (a - 1), 2 * (b - 1)]
        ys = [x + 1 for x in xs]
        sigma[np.ix_(ys, ys)] = base_variance * tied
        sigma[np.ix_(xs, xs)] = base_variance * (opposed if mode == "mirror" else tied)
    for j in set(range(1, J + 1)) - used:
        sigma[2 * j - 1, 2 * j - 1] = base_variance
        if mode == "literal":
            sigma[2 * j - 2, 2 * j - 2] = base_variance
    return sigma
