"""Pydantic models for file formats and request/response handling"""
from typing import Any, Dict, List, Literal, Optional, Tuple, Type, TypeVar, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError, model_validator

from app.config import settings
from app.errors import ConfigError
from app.services.curves import ControlPolygon, num_points
from app.services.inference import PriorConfig
from app.services.shape_process import ShapeProcessSpec, default_degrees, reflection_symmetry_cov

ModelT = TypeVar("ModelT", bound=BaseModel)


def parse_model(model: Type[ModelT], data: Any) -> ModelT:
    """Validate data, reporting the first offending field as a ConfigError"""
    try:
        return model.model_validate(data)
    except ValidationError as exc:
        error = exc.errors()[0]
        location = ".".join(str(part) for part in error["loc"]) or model.__name__
        raise ConfigError(error["msg"], field=location) from exc


class PolygonModel(BaseModel):
    """Control polygon file format"""
    degree: int = Field(ge=1)
    coords: List[float]

    @model_validator(mode="after")
    def check_length(self) -> "PolygonModel":
        expected = 2 * num_points(self.degree)
        if len(self.coords) != expected:
            raise ValueError(f"degree {self.degree} needs {expected} coordinates, got {len(self.coords)}")
        return self

    def to_polygon(self) -> ControlPolygon:
        return ControlPolygon(degree=self.degree, coords=np.asarray(self.coords))

    @classmethod
    def from_polygon(cls, polygon: ControlPolygon) -> "PolygonModel":
        return cls(**polygon.to_dict())


class SigmaDiag(BaseModel):
    """Isotropic covariance v * I"""
    diag: float = Field(ge=0.0)


class SigmaPaired(BaseModel):
    """Reflection-symmetric covariance tying paired control points"""
    paired: List[Tuple[int, int]]
    variance: float = Field(default=1.0, ge=0.0)
    mode: Literal["literal", "mirror"] = "literal"


SigmaEntry = Union[SigmaDiag, SigmaPaired, List[List[float]]]


def _covariance(entry: SigmaEntry, degree: int) -> np.ndarray:
    size = 2 * num_points(degree)
    if isinstance(entry, SigmaDiag):
        return entry.diag * np.eye(size)
    if isinstance(entry, SigmaPaired):
        return reflection_symmetry_cov(degree, entry.paired, entry.variance, mode=entry.mode)
    return np.asarray(entry, dtype=float)


class ShapeSpecModel(BaseModel):
    """Shape process spec file.

    Missing means default to zero above level 0 and to a unit circle at level
    0; a missing degree schedule defaults to 1, 3, 7, ... A zero sigma_m pins
    the center at mu_m.
    """
    R: Optional[int] = Field(default=None, ge=0)
    degrees: Optional[List[int]] = None
    mu: Optional[List[Optional[List[float]]]] = None
    sigma: List[SigmaEntry]
    mu_m: List[float] = Field(default_factory=lambda: [0.0, 0.0])
    sigma_m: Optional[Union[SigmaDiag, List[List[float]]]] = None

    @model_validator(mode="after")
    def check_levels(self) -> "ShapeSpecModel":
        levels = len(self.sigma)
        if self.R is not None and self.R + 1 != levels:
            raise ValueError(f"R={self.R} needs {self.R + 1} sigma entries, got {levels}")
        if self.degrees is not None and len(self.degrees) != levels:
            raise ValueError(f"{len(self.degrees)} degrees for {levels} sigma entries")
        if self.mu is not None and len(self.mu) != levels:
            raise ValueError(f"{len(self.mu)} means for {levels} sigma entries")
        return self

    @property
    def level_degrees(self) -> Tuple[int, ...]:
        if self.degrees is not None:
            return tuple(self.degrees)
        return default_degrees(len(self.sigma) - 1)

    def to_spec(self, center_variance: float = 0.0) -> ShapeProcessSpec:
        """Build the process; a missing sigma_m becomes center_variance * I"""
        degrees = self.level_degrees
        mu = []
        for r, n in enumerate(degrees):
            given = self.mu[r] if self.mu is not None else None
            if given is not None:
                mu.append(np.asarray(given, dtype=float))
            elif r == 0:
                mu.append(np.tile([0.0, 2.0], 3))
            else:
                mu.append(np.zeros(2 * num_points(n)))
        sigma = []
        for r, (entry, n) in enumerate(zip(self.sigma, degrees)):
            try:
                sigma.append(_covariance(entry, n))
            except ConfigError as exc:
                raise ConfigError(str(exc), field=f"sigma[{r}]") from exc
        if self.sigma_m is None:
            sigma_m = center_variance * np.eye(2)
        elif isinstance(self.sigma_m, SigmaDiag):
            sigma_m = self.sigma_m.diag * np.eye(2)
        else:
            sigma_m = np.asarray(self.sigma_m, dtype=float)
        return ShapeProcessSpec(
            degrees=degrees,
            mu=tuple(mu),
            sigma=tuple(sigma),
            mu_m=np.asarray(self.mu_m, dtype=float),
            sigma_m=sigma_m,
        )


class PriorModel(BaseModel):
    """Noise and population hyperpriors"""
    alpha: float = Field(default=1.0, gt=0)
    beta: float = Field(default=1.0, gt=0)
    a_tau: float = Field(default=1.0, gt=0)
    b_tau: float = Field(default=1.0, gt=0)
    hyper_variance: float = Field(default=100.0, gt=0)

    def to_prior(self, spec: ShapeProcessSpec) -> PriorConfig:
        return PriorConfig(spec=spec, **self.model_dump())


class MCMCConfig(BaseModel):
    """Chain length, thinning and sampler knobs"""
    iterations: int = Field(default_factory=lambda: settings.default_iterations, ge=1)
    burnin: int = Field(default_factory=lambda: settings.default_burnin, ge=0)
    thin: int = Field(default_factory=lambda: settings.default_thin, ge=1)
    seed: int = Field(default_factory=lambda: settings.default_seed, ge=0)
    grid: int = Field(default_factory=lambda: settings.griddy_grid_size, ge=2)
    threads: int = Field(default_factory=lambda: settings.default_threads, ge=1)
    orientation_in_griddy: bool = Field(default_factory=lambda: settings.orientation_in_griddy)

    @model_validator(mode="after")
    def check_burnin(self) -> "MCMCConfig":
        if self.burnin > self.iterations:
            raise ValueError(f"burn-in {self.burnin} exceeds {self.iterations} iterations")
        return self

    @property
    def stored(self) -> int:
        return (self.iterations - self.burnin) // self.thin


class ShapeRecord(BaseModel):
    """One shape's latents at a stored iteration"""
    m: List[float]
    deformations: List[List[float]]
    polygon: List[float]


class ChainRecord(BaseModel):
    """One JSON-lines chain record"""
    iteration: int
    tau_p: float
    tau2: Optional[float] = None
    log_likelihood: float
    log_posterior: float
    mu: Optional[List[List[float]]] = None
    shapes: List[ShapeRecord]


class ChainSummary(BaseModel):
    """Posterior summary written next to the chain"""
    K: int
    point_counts: List[int]
    orientations: bool
    iterations: int
    burnin: int
    thin: int
    seed: int
    records: int
    tau_p: float
    tau2: Optional[float] = None
    acceptance: List[List[float]]
    posterior_mean: List[PolygonModel]
    central_shape: PolygonModel
    threshold_sweep: Optional[Dict[str, int]] = None
    fit_quality: Optional[str] = None


class TrajectoryModel(BaseModel):
    """Shape process draw with every level"""
    m: List[float]
    deformations: List[List[float]]
    polygons: List[PolygonModel]


class SampleRequest(BaseModel):
    """Request to draw shapes from the process"""
    spec: ShapeSpecModel
    count: int = Field(default=1, ge=0, le=100)
    seed: int = Field(default=0, ge=0)


class SampleResponse(BaseModel):
    """Sampled trajectories"""
    seed: int
    trajectories: List[TrajectoryModel]


class CentralRequest(BaseModel):
    """Request for the central shape of a spec"""
    spec: ShapeSpecModel


class RenderRequest(BaseModel):
    """Request to render a polygon as SVG"""
    polygon: PolygonModel
    samples: int = Field(default=512, ge=2, le=100000)


class FitPointsRequest(BaseModel):
    """Point cloud fit request"""
    points: List[Tuple[float, float]] = Field(min_length=3)
    theta: Optional[List[float]] = None
    spec: ShapeSpecModel
    prior: PriorModel = Field(default_factory=PriorModel)
    mcmc: MCMCConfig = Field(default_factory=MCMCConfig)

    @model_validator(mode="after")
    def check_angles(self) -> "FitPointsRequest":
        if self.theta is not None and len(self.theta) != len(self.points):
            raise ValueError(f"{len(self.theta)} angles for {len(self.points)} points")
        return self
