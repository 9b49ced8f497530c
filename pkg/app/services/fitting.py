"""Fit service tying spec files, observations, the sampler and storage together"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.config import settings
from app.errors import DomainError
from app.models import ChainSummary, MCMCConfig, PriorModel, ShapeSpecModel
from app.services.curves import ControlPolygon
from app.services.images import (
    GrayImage,
    OrientedPointCloud,
    extract_cloud,
    gradient_field,
    threshold_sweep,
)
from app.services.inference import PriorConfig, ShapeObservations
from app.services.sampler import ChainOutput, run_chain
from app.services.shape_process import ShapeTrajectory, central_shape, sample_shapes
from app.storage import Storage, storage

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class FitResult:
    """Chain output with the prior it ran under and its summary"""

    output: ChainOutput
    prior: PriorConfig
    summary: ChainSummary
    clouds: List[OrientedPointCloud] = field(repr=False)

    @property
    def posterior_mean(self) -> List[ControlPolygon]:
        return [model.to_polygon() for model in self.summary.posterior_mean]

    @property
    def central_shape(self) -> ControlPolygon:
        return self.summary.central_shape.to_polygon()


class FitService:
    """Service for sampling, rendering and fitting shapes"""

    def __init__(self, store: Optional[Storage] = None):
        self.storage = store or storage

    def build_prior(self, spec: ShapeSpecModel, prior: Optional[PriorModel] = None) -> PriorConfig:
        """Prior for a fit; specs without sigma_m get a broad center prior"""
        return (prior or PriorModel()).to_prior(spec.to_spec(settings.center_prior_variance))

    def sample(self, spec: ShapeSpecModel, count: int, seed: int) -> List[ShapeTrajectory]:
        """Independent draws from the shape process"""
        if count < 0:
            raise DomainError(f"count must be non-negative, got {count}")
        return sample_shapes(spec.to_spec(), count, seed)

    def central(self, spec: ShapeSpecModel) -> ControlPolygon:
        return central_shape(spec.to_spec(), strict=False)

    def render(
        self,
        polygons: Sequence[ControlPolygon],
        samples: int = 512,
        points: Optional[np.ndarray] = None,
    ) -> str:
        return self.storage.render_svg(polygons, samples=samples, points=points)

    def extract(
        self,
        image: GrayImage,
        threshold: Optional[float] = None,
        blur: bool = False,
    ) -> Tuple[OrientedPointCloud, Dict[str, int]]:
        """Oriented cloud at the threshold plus the 0.3/0.5/0.7 sweep counts"""
        gradients = gradient_field(image, blur=blur)
        cloud = extract_cloud(gradients, threshold)
        logger.info("Extracted %d edge points from %dx%d raster", cloud.count, image.width, image.height)
        return cloud, threshold_sweep(gradients)

    def _fit(
        self,
        clouds: Sequence[OrientedPointCloud],
        spec: ShapeSpecModel,
        prior: Optional[PriorModel],
        mcmc: Optional[MCMCConfig],
        population: bool,
    ) -> FitResult:
        prior_config = self.build_prior(spec, prior)
        obs = [ShapeObservations.from_cloud(cloud) for cloud in clouds]
        for k, data in enumerate(obs):
            if data.count < 3:
                raise DomainError(f"cloud {k} has {data.count} points; at least 3 are required")
        output = run_chain(obs, prior_config, mcmc or MCMCConfig(), population=population)
        return FitResult(output=output, prior=prior_config, summary=output.summary(prior_config), clouds=list(clouds))

    def fit_points(
        self,
        cloud: OrientedPointCloud,
        spec: ShapeSpecModel,
        prior: Optional[PriorModel] = None,
        mcmc: Optional[MCMCConfig] = None,
    ) -> FitResult:
        """Single-shape fit of a point cloud"""
        return self._fit([cloud], spec, prior, mcmc, population=False)

    def fit_image(
        self,
        image: GrayImage,
        spec: ShapeSpecModel,
        prior: Optional[PriorModel] = None,
        mcmc: Optional[MCMCConfig] = None,
        threshold: Optional[float] = None,
        blur: bool = False,
    ) -> FitResult:
        """Gradient threshold, oriented cloud, then a single-shape fit"""
        cloud, sweep = self.extract(image, threshold, blur)
        if cloud.count == 0:
            raise DomainError("empty point cloud: no gradient exceeds the threshold")
        result = self.fit_points(cloud, spec, prior, mcmc)
        result.summary.threshold_sweep = sweep
        return result

    def fit_population(
        self,
        clouds: Sequence[OrientedPointCloud],
        spec: ShapeSpecModel,
        prior: Optional[PriorModel] = None,
        mcmc: Optional[MCMCConfig] = None,
    ) -> FitResult:
        """Hierarchical fit with shared mean deformations"""
        if len(clouds) < 2:
            raise DomainError(f"population fits need at least 2 clouds, got {len(clouds)}")
        return self._fit(clouds, spec, prior, mcmc, population=True)

    def save_run(self, result: FitResult, out_dir: Path, samples: int = 512) -> Dict[str, Path]:
        """Chain, summary, posterior-mean polygons and overlay renders"""
        out_dir = self.storage.run_dir(out_dir)
        files = {
            "chain": self.storage.write_chain(out_dir / "chain.jsonl", result.output.records),
            "summary": self.storage.save_summary(out_dir / "summary.json", result.summary),
            "central": self.storage.save_polygon(out_dir / "central_shape.json", result.central_shape),
        }
        for k, (polygon, cloud) in enumerate(zip(result.posterior_mean, result.clouds)):
            name = "posterior_mean" if len(result.clouds) == 1 else f"posterior_mean_{k}"
            files[name] = self.storage.save_polygon(out_dir / f"{name}.json", polygon)
            files[f"{name}_svg"] = self.storage.save_svg(
                out_dir / f"{name}.svg", self.render([polygon], samples, points=cloud.points)
            )
        if len(result.clouds) > 1:
            files["central_svg"] = self.storage.save_svg(
                out_dir / "central_shape.svg", self.render([result.central_shape], samples)
            )
        logger.info("Wrote %d files to %s", len(files), out_dir)
        return files


# Global fit service instance
fit_service: Optional[FitService] = None


def get_fit_service() -> FitService:
    """Get or create fit service singleton"""
    global fit_service
    if fit_service is None:
        fit_service = FitService()
    return fit_service
