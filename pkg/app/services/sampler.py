"""Chain orchestration: sweep order, thinning, threads and retries"""
import logging
from concurrent.futures import ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.linalg import LinAlgError

from app.config import settings
from app.errors import DomainError, NumericalError
from app.models import ChainRecord, ChainSummary, MCMCConfig, PolygonModel, ShapeRecord
from app.services.curves import ControlPolygon
from app.services.inference import (
    GriddySpec,
    ModelState,
    ObservationSet,
    PriorConfig,
    cond_update_m,
    d_conditional,
    data_loglik,
    griddy_update_all,
    initial_state,
    log_posterior,
    mh_correct,
    refresh_caches,
    update_mu_r,
    update_tau_p,
    update_tau_theta,
)
from app.services.shape_process import ShapeProcessSpec, central_shape

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class ChainOutput:
    """Thinned records plus acceptance rates and the log-likelihood trace"""

    config: MCMCConfig
    point_counts: List[int]
    orientations: bool
    population: bool
    records: List[ChainRecord] = field(default_factory=list)
    log_likelihood: List[float] = field(default_factory=list)
    acceptance: List[List[float]] = field(default_factory=list)
    state: Optional[ModelState] = field(default=None, repr=False)

    @property
    def K(self) -> int:
        return len(self.point_counts)

    def posterior_mean_polygons(self, degree: int) -> List[ControlPolygon]:
        """Average control points of c^(R),k over stored records"""
        if not self.records:
            return [shape.polygon for shape in self.state.shapes]
        coords = np.mean([[s.polygon for s in rec.shapes] for rec in self.records], axis=0)
        return [ControlPolygon(degree=degree, coords=c) for c in coords]

    def posterior_mean_mu(self) -> List[np.ndarray]:
        if not self.records or self.records[0].mu is None:
            return [m.copy() for m in self.state.mu]
        levels = len(self.records[0].mu)
        return [np.mean([rec.mu[r] for rec in self.records], axis=0) for r in range(levels)]

    def posterior_mean_center(self) -> np.ndarray:
        if not self.records:
            return np.mean([shape.m for shape in self.state.shapes], axis=0)
        return np.mean([[s.m for s in rec.shapes] for rec in self.records], axis=(0, 1))

    def central_shape(self, prior: PriorConfig) -> ControlPolygon:
        """Population central shape at the posterior mean, or the single-shape posterior mean curve"""
        spec = prior.spec
        if not self.population:
            return self.posterior_mean_polygons(spec.degrees[-1])[0]
        central_spec = ShapeProcessSpec(
            degrees=spec.degrees,
            mu=tuple(self.posterior_mean_mu()),
            sigma=spec.sigma,
            mu_m=self.posterior_mean_center(),
            sigma_m=spec.sigma_m,
        )
        return central_shape(central_spec, strict=False)

    def summary(self, prior: PriorConfig) -> ChainSummary:
        tau_p = [rec.tau_p for rec in self.records] or [self.state.tau_p]
        tau2 = None
        if self.orientations:
            tau2 = float(np.mean([rec.tau2 for rec in self.records] or [self.state.tau2]))
        return ChainSummary(
            K=self.K,
            point_counts=self.point_counts,
            orientations=self.orientations,
            iterations=self.config.iterations,
            burnin=self.config.burnin,
            thin=self.config.thin,
            seed=self.config.seed,
            records=len(self.records),
            tau_p=float(np.mean(tau_p)),
            tau2=tau2,
            acceptance=self.acceptance,
            posterior_mean=[
                PolygonModel.from_polygon(c) for c in self.posterior_mean_polygons(prior.spec.degrees[-1])
            ],
            central_shape=PolygonModel.from_polygon(self.central_shape(prior)),
        )


def _shape_sweep(
    state: ModelState,
    k: int,
    obs: ObservationSet,
    prior: PriorConfig,
    grid: GriddySpec,
    jitter: float,
) -> None:
    """Steps that only touch shape k: caches, t, m, then d^(0..R) with MH"""
    spec = prior.spec
    shape = state.shapes[k]
    refresh_caches(shape, spec)
    griddy_update_all(state, k, obs, grid)
    cond_update_m(state, k, obs, prior, jitter=jitter)
    for r in range(spec.R + 1):
        proposal = d_conditional(state, k, r, obs, prior, jitter)
        mh_correct(state, k, r, proposal.sample(shape.rng), obs, prior, proposal)


def _sweep(
    state: ModelState,
    obs: ObservationSet,
    prior: PriorConfig,
    grid: GriddySpec,
    jitter: float,
    pool: Optional[ThreadPoolExecutor],
) -> None:
    if pool is None:
        for k in range(state.K):
            _shape_sweep(state, k, obs, prior, grid, jitter)
    else:
        futures = [pool.submit(_shape_sweep, state, k, obs, prior, grid, jitter) for k in range(state.K)]
        # every worker must finish before a failure reaches the retry path
        wait(futures)
        for future in futures:
            future.result()

    update_tau_p(state, obs, prior)
    if any(data.has_angles for data in obs):
        update_tau_theta(state, obs, prior)
    if state.population:
        for r in range(prior.spec.R + 1):
            update_mu_r(state, r, prior)


def _record(state: ModelState, iteration: int, loglik: float, obs: ObservationSet, prior: PriorConfig) -> ChainRecord:
    return ChainRecord(
        iteration=iteration,
        tau_p=state.tau_p,
        tau2=state.tau2 if any(data.has_angles for data in obs) else None,
        log_likelihood=loglik,
        log_posterior=log_posterior(state, obs, prior),
        mu=[m.tolist() for m in state.mu] if state.population else None,
        shapes=[
            ShapeRecord(
                m=shape.m.tolist(),
                deformations=[d.tolist() for d in shape.deformations],
                polygon=shape.polygon.coords.tolist(),
            )
            for shape in state.shapes
        ],
    )


def run_chain(
    obs: ObservationSet,
    prior: PriorConfig,
    config: Optional[MCMCConfig] = None,
    population: Optional[bool] = None,
    state: Optional[ModelState] = None,
) -> ChainOutput:
    """Run the sampler and keep every thin-th post-burn-in state"""
    config = config or MCMCConfig()
    if not obs:
        raise DomainError("at least one observation set is required")
    grid = GriddySpec(size=config.grid, include_orientation=config.orientation_in_griddy)
    population = len(obs) > 1 if population is None else population
    if state is None:
        state = initial_state(obs, prior, seed=config.seed, grid=grid, population=population)

    output = ChainOutput(
        config=config,
        point_counts=[data.count for data in obs],
        orientations=any(data.has_angles for data in obs),
        population=state.population,
        state=state,
    )
    logger.info(
        "Running chain: K=%d iterations=%d burnin=%d thin=%d seed=%d threads=%d",
        state.K, config.iterations, config.burnin, config.thin, config.seed, config.threads,
    )

    pool = ThreadPoolExecutor(max_workers=config.threads) if config.threads > 1 and state.K > 1 else None
    progress_step = max(config.iterations // 10, 1)
    try:
        for iteration in range(1, config.iterations + 1):
            snapshot = state.snapshot()
            try:
                _sweep(state, obs, prior, grid, 0.0, pool)
            except (NumericalError, LinAlgError) as exc:
                logger.warning("Iteration %d failed (%s); retrying with jitter", iteration, exc)
                state.restore(snapshot)
                try:
                    _sweep(state, obs, prior, grid, settings.cholesky_jitter, pool)
                except (NumericalError, LinAlgError) as retry_exc:
                    raise NumericalError(f"iteration {iteration} failed after jitter retry: {retry_exc}") from retry_exc

            loglik = sum(
                data_loglik(shape.polygon, data, shape.t, state.tau_p, state.tau2)
                for shape, data in zip(state.shapes, obs)
            )
            output.log_likelihood.append(float(loglik))

            kept = iteration - config.burnin
            if kept > 0 and kept % config.thin == 0:
                output.records.append(_record(state, iteration, float(loglik), obs, prior))

            if iteration % progress_step == 0:
                logger.info("Iteration %d/%d: loglik=%.4f tau_p=%.4g", iteration, config.iterations, loglik, state.tau_p)
    finally:
        if pool is not None:
            pool.shutdown()

    output.acceptance = [shape.acceptance_rates() for shape in state.shapes]
    for k, rates in enumerate(output.acceptance):
        logger.info("Shape %d acceptance by level: %s", k, ", ".join(f"{a:.3f}" for a in rates))
    return output
