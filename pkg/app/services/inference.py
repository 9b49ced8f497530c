"""Conditional updates of the Gibbs / Metropolis-within-Gibbs engine.

Control-point updates linearize the orienting blocks (the approximate blocks
are linear in the polygon once the curve length L_A is frozen for a sweep), so
every center and deformation conditional is a multivariate normal. Deformation
draws from that normal serve as independence proposals for an MH step whose
target uses the exact rotation blocks.

Degenerate covariances are handled through their reduced spectral factor F:
a deformation is written d = mu + F z with z ~ N(0, I), and every posterior is
solved in z-space.
"""
import copy
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, lstsq, solve_triangular
from scipy.stats import gamma, invgamma

from app.config import settings
from app.errors import ConfigError, DimensionError, DomainError, NumericalError, ShapeModelError
from app.services.curves import (
    ControlPolygon,
    curve_points,
    design_matrix,
    hodograph_points,
    total_length,
)
from app.services.deformation import approx_deformation_operator, orienting_block_exact
from app.services.images import OrientedPointCloud
from app.services.likelihood import (
    LOG_2PI,
    loglik_orientations,
    loglik_points,
    orientation_precision,
    orientation_residuals,
    point_residuals,
)
from app.services.shape_process import (
    ShapeProcessSpec,
    ShapeTrajectory,
    broadcast_matrix,
    check_covariance,
    initial_block,
    initial_polygon,
    process_step,
    spectral_factor,
    trajectory_from_deformations,
)

logger = logging.getLogger(__name__)

MIN_LENGTH = 1e-12


@dataclass(frozen=True, eq=False)
class ShapeObservations:
    """Observed points of one shape and, optionally, their tangent angles"""

    points: np.ndarray = field(repr=False)
    theta: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        if not np.all(np.isfinite(points)):
            raise DomainError("observed points must be finite")
        object.__setattr__(self, "points", points)
        if self.theta is not None:
            theta = np.asarray(self.theta, dtype=float).ravel()
            if theta.size != points.shape[0]:
                raise DimensionError(f"{theta.size} angles for {points.shape[0]} points")
            object.__setattr__(self, "theta", theta)

    @property
    def count(self) -> int:
        return self.points.shape[0]

    @property
    def has_angles(self) -> bool:
        return self.theta is not None

    @property
    def stacked(self) -> np.ndarray:
        """p = (p_1x, p_1y, ..., p_Nx, p_Ny)"""
        return self.points.ravel()

    @classmethod
    def from_cloud(cls, cloud: OrientedPointCloud) -> "ShapeObservations":
        return cls(points=cloud.points, theta=cloud.theta)


ObservationSet = Sequence[ShapeObservations]


@dataclass(frozen=True)
class GriddySpec:
    """Uniform grid of G parameter values on [-pi, pi)"""

    size: int = field(default_factory=lambda: settings.griddy_grid_size)
    include_orientation: bool = field(default_factory=lambda: settings.orientation_in_griddy)

    def __post_init__(self):
        if self.size < 2:
            raise ConfigError(f"griddy grid needs at least 2 points, got {self.size}", field="grid")

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(-np.pi, np.pi, self.size, endpoint=False)

    @property
    def cell(self) -> float:
        return 2.0 * np.pi / self.size


@dataclass(frozen=True, eq=False)
class PriorConfig:
    """Shape process plus the hyperpriors of the noise and population levels"""

    spec: ShapeProcessSpec
    alpha: float = 1.0
    beta: float = 1.0
    a_tau: float = 1.0
    b_tau: float = 1.0
    mu_mu: Optional[Tuple[np.ndarray, ...]] = field(default=None, repr=False)
    sigma_mu: Optional[Tuple[np.ndarray, ...]] = field(default=None, repr=False)
    hyper_variance: float = 100.0

    def __post_init__(self):
        for name in ("alpha", "beta", "a_tau", "b_tau", "hyper_variance"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ConfigError(f"must be positive, got {value}", field=name)

        spec = self.spec
        sizes = [2 * spec.num_points(r) for r in range(spec.R + 1)]
        mu_mu = spec.mu if self.mu_mu is None else self.mu_mu
        sigma_mu = (
            tuple(self.hyper_variance * np.eye(s) for s in sizes)
            if self.sigma_mu is None else self.sigma_mu
        )
        if len(mu_mu) != spec.R + 1 or len(sigma_mu) != spec.R + 1:
            raise ConfigError(f"hyperpriors need {spec.R + 1} levels", field="mu_mu")
        mu_mu = tuple(np.asarray(m, dtype=float).ravel() for m in mu_mu)
        for r, (m, s) in enumerate(zip(mu_mu, sizes)):
            if m.size != s:
                raise ConfigError(f"level {r} needs {s} entries, got {m.size}", field=f"mu_mu[{r}]")
        sigma_mu = tuple(check_covariance(c, s, f"sigma_mu[{r}]") for r, (c, s) in enumerate(zip(sigma_mu, sizes)))

        object.__setattr__(self, "mu_mu", mu_mu)
        object.__setattr__(self, "sigma_mu", sigma_mu)
        object.__setattr__(self, "_hyper_factors", tuple(spectral_factor(c) for c in sigma_mu))

    def hyper_factor(self, r: int) -> np.ndarray:
        return self._hyper_factors[r]


@dataclass(eq=False)
class ShapeState:
    """Latents of one shape plus the per-sweep linearization caches"""

    m: np.ndarray
    deformations: List[np.ndarray]
    t: np.ndarray
    rng: np.random.Generator = field(repr=False)
    trajectory: Optional[ShapeTrajectory] = field(default=None, repr=False)
    # index r holds L_A and (I + G_r) E_r for level r >= 1; index 0 is unused
    lengths: List[Optional[float]] = field(default_factory=list, repr=False)
    factors: List[Optional[np.ndarray]] = field(default_factory=list, repr=False)
    accepted: np.ndarray = field(default=None, repr=False)
    proposed: np.ndarray = field(default=None, repr=False)

    @property
    def polygon(self) -> ControlPolygon:
        return self.trajectory.final

    def acceptance_rates(self) -> List[float]:
        with np.errstate(invalid="ignore", divide="ignore"):
            rates = np.where(self.proposed > 0, self.accepted / np.maximum(self.proposed, 1), 0.0)
        return rates.tolist()


@dataclass(eq=False)
class ModelState:
    """Per-shape latents and the shared hyperparameters"""

    shapes: List[ShapeState]
    mu: List[np.ndarray]
    tau_p: float
    tau2: float
    rng: np.random.Generator = field(repr=False)
    population: bool = False

    @property
    def K(self) -> int:
        return len(self.shapes)

    def snapshot(self) -> "ModelState":
        return copy.deepcopy(self)

    def restore(self, snapshot: "ModelState") -> None:
        """Roll latents back to a snapshot while keeping the advanced generators"""
        for shape, saved in zip(self.shapes, snapshot.shapes):
            rng = shape.rng
            shape.__dict__.update(copy.deepcopy(saved.__dict__))
            shape.rng = rng
        self.mu = [m.copy() for m in snapshot.mu]
        self.tau_p = snapshot.tau_p
        self.tau2 = snapshot.tau2


def _check_state(state: ModelState, obs: ObservationSet) -> None:
    if len(obs) != state.K:
        raise DimensionError(f"{len(obs)} observation sets for {state.K} shapes")


def _omega_factor(spec: ShapeProcessSpec, r: int, d: np.ndarray, length: float) -> np.ndarray:
    """(I + (2 pi / L_A) G(d_r)) E_r"""
    E = spec.elevation(r)
    G = approx_deformation_operator(spec.degrees[r], d, length)
    return E + G @ E


def _approx_length(c: ControlPolygon) -> float:
    length = total_length(c)
    if length < MIN_LENGTH:
        logger.warning("Curve collapsed to a point (length %.2e); clamping L_A", length)
        return MIN_LENGTH
    return length


def refresh_caches(shape: ShapeState, spec: ShapeProcessSpec) -> None:
    """Rebuild the exact trajectory, then L_A and the Omega factors for every level"""
    shape.trajectory = trajectory_from_deformations(spec, shape.m, shape.deformations, strict=False)
    shape.lengths = [None]
    shape.factors = [None]
    for r in range(1, spec.R + 1):
        length = _approx_length(shape.trajectory.polygons[r - 1])
        shape.lengths.append(length)
        shape.factors.append(_omega_factor(spec, r, shape.deformations[r], length))


def composite_omega(shape: ShapeState, spec: ShapeProcessSpec, a: int, b: int) -> np.ndarray:
    """Omega_a^b = F_b ... F_a, or the identity when a > b"""
    if a > b:
        return np.eye(2 * spec.num_points(b))
    if a < 1 or b > spec.R:
        raise DimensionError(f"levels {a}..{b} outside 1..{spec.R}")
    if len(shape.factors) != spec.R + 1 or any(shape.factors[r] is None for r in range(a, b + 1)):
        raise RuntimeError("linearization caches are missing; call refresh_caches first")
    omega = shape.factors[a]
    for r in range(a + 1, b + 1):
        omega = shape.factors[r] @ omega
    return omega


def _latent(x: np.ndarray, mean: np.ndarray, factor: np.ndarray) -> np.ndarray:
    if factor.shape[1] == 0:
        return np.zeros(0)
    z, *_ = lstsq(factor, np.asarray(x, dtype=float) - mean)
    return z


def factor_logpdf(x: np.ndarray, mean: np.ndarray, factor: np.ndarray) -> float:
    """Log N(x; mean, F F') measured on the range of F"""
    z = _latent(x, mean, factor)
    k = z.size
    log_det = float(np.sum(np.log(np.linalg.svd(factor, compute_uv=False)))) if k else 0.0
    return float(-0.5 * z @ z - 0.5 * k * LOG_2PI - log_det)


class NormalConditional:
    """Posterior of x under a Gaussian likelihood -1/2 x'Lx + eta'x and prior N(mu, F F')"""

    def __init__(
        self,
        prior_mean: np.ndarray,
        factor: np.ndarray,
        precision: np.ndarray,
        shift: np.ndarray,
        jitter: float = 0.0,
    ):
        self.prior_mean = np.asarray(prior_mean, dtype=float).ravel()
        self.factor = np.asarray(factor, dtype=float)
        precision = np.asarray(precision, dtype=float)
        shift = np.asarray(shift, dtype=float).ravel()
        if precision.shape != (self.prior_mean.size,) * 2 or shift.size != self.prior_mean.size:
            raise DimensionError(
                f"precision {precision.shape} and shift {shift.size} do not match dimension {self.prior_mean.size}"
            )

        k = self.factor.shape[1]
        self.rank = k
        if k == 0:
            self.chol = np.zeros((0, 0))
            self.mean_z = np.zeros(0)
            return

        F = self.factor
        precision_z = F.T @ precision @ F + np.eye(k)
        precision_z = 0.5 * (precision_z + precision_z.T)
        shift_z = F.T @ (shift - precision @ self.prior_mean)
        self.chol = self._factorize(precision_z, jitter)
        self.mean_z = cho_solve((self.chol, True), shift_z)

    @staticmethod
    def _factorize(precision: np.ndarray, jitter: float) -> np.ndarray:
        k = precision.shape[0]
        if not np.all(np.isfinite(precision)):
            raise NumericalError("posterior precision has non-finite entries")
        try:
            return cholesky(precision + jitter * np.eye(k), lower=True)
        except LinAlgError:
            retry = jitter + settings.cholesky_jitter * max(1.0, float(np.mean(np.diag(precision))))
            logger.warning("Cholesky failed; retrying with diagonal jitter %.1e", retry)
        try:
            return cholesky(precision + retry * np.eye(k), lower=True)
        except LinAlgError as exc:
            raise NumericalError(f"posterior precision is not positive definite: {exc}") from exc

    @property
    def mean(self) -> np.ndarray:
        return self.prior_mean + self.factor @ self.mean_z

    @property
    def covariance(self) -> np.ndarray:
        if self.rank == 0:
            return np.zeros((self.prior_mean.size,) * 2)
        L_inv_F = solve_triangular(self.chol, self.factor.T, lower=True)
        return L_inv_F.T @ L_inv_F

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        if self.rank == 0:
            return self.prior_mean.copy()
        xi = rng.standard_normal(self.rank)
        z = self.mean_z + solve_triangular(self.chol.T, xi, lower=False)
        return self.prior_mean + self.factor @ z

    def logpdf(self, x: np.ndarray) -> float:
        """Density of the proposal measured on the range of F"""
        if self.rank == 0:
            return 0.0
        delta = _latent(x, self.prior_mean, self.factor) - self.mean_z
        u = self.chol.T @ delta
        return float(-0.5 * u @ u + np.sum(np.log(np.diag(self.chol))) - 0.5 * self.rank * LOG_2PI)


def conditional_normal(
    Q: np.ndarray,
    y: np.ndarray,
    noise_precision: float,
    prior_mean: np.ndarray,
    prior_cov: np.ndarray,
    jitter: float = 0.0,
) -> NormalConditional:
    """x | y for y = Q x + e, e ~ N(0, I / noise_precision), x ~ N(prior_mean, prior_cov)"""
    Q = np.asarray(Q, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    return NormalConditional(
        prior_mean=prior_mean,
        factor=spectral_factor(prior_cov),
        precision=noise_precision * Q.T @ Q,
        shift=noise_precision * Q.T @ y,
        jitter=jitter,
    )


def m_conditional(
    state: ModelState,
    k: int,
    obs: ObservationSet,
    prior: PriorConfig,
    jitter: float = 0.0,
) -> NormalConditional:
    """Normal conditional of the center m^k.

    Translating c^(0) translates every later polygon by the same amount, so
    this conditional is exact and needs no MH correction.
    """
    spec = prior.spec
    shape, data = state.shapes[k], obs[k]
    X = design_matrix(spec.degrees[-1], shape.t)

    Q = X @ composite_omega(shape, spec, 1, spec.R) @ broadcast_matrix(3)
    offset = shape.polygon.coords - broadcast_matrix(spec.num_points(spec.R)) @ shape.m
    y = data.stacked - X @ offset
    return NormalConditional(
        prior_mean=spec.mu_m,
        factor=spec.factor_m,
        precision=state.tau_p * Q.T @ Q,
        shift=state.tau_p * Q.T @ y,
        jitter=jitter,
    )


def cond_update_m(
    state: ModelState,
    k: int,
    obs: ObservationSet,
    prior: PriorConfig,
    rng: Optional[np.random.Generator] = None,
    jitter: float = 0.0,
) -> np.ndarray:
    """Gibbs draw of the center m^k"""
    shape = state.shapes[k]
    rng = shape.rng if rng is None else rng
    shape.m = m_conditional(state, k, obs, prior, jitter).sample(rng)
    shape.trajectory = trajectory_from_deformations(prior.spec, shape.m, shape.deformations, strict=False)
    return shape.m


def _level_operator(shape: ShapeState, spec: ShapeProcessSpec, r: int) -> Tuple[np.ndarray, np.ndarray]:
    """(A, b) with c^(R) ~ A d^(r) + b under the frozen linearization"""
    omega = composite_omega(shape, spec, r + 1, spec.R)
    if r == 0:
        return omega @ initial_block().matrix, omega @ (broadcast_matrix(3) @ shape.m)
    c_prev = shape.trajectory.polygons[r - 1]
    elevated = ControlPolygon(degree=spec.degrees[r], coords=spec.elevation(r) @ c_prev.coords)
    block = orienting_block_exact(elevated, strict=False).matrix
    return omega @ block, omega @ elevated.coords


def d_conditional(
    state: ModelState,
    k: int,
    r: int,
    obs: ObservationSet,
    prior: PriorConfig,
    jitter: float = 0.0,
) -> NormalConditional:
    """Approximate normal conditional of d^(r),k"""
    spec = prior.spec
    if not 0 <= r <= spec.R:
        raise DimensionError(f"level {r} outside 0..{spec.R}")
    shape, data = state.shapes[k], obs[k]
    A, b = _level_operator(shape, spec, r)
    X = design_matrix(spec.degrees[-1], shape.t)
    Q = X @ A
    precision = state.tau_p * Q.T @ Q
    shift = state.tau_p * Q.T @ (data.stacked - X @ b)
    if data.has_angles:
        W = orientation_precision(spec.degrees[-1], shape.t, data.theta)
        precision = precision + A.T @ W @ A / state.tau2
        shift = shift - A.T @ W @ b / state.tau2
    return NormalConditional(
        prior_mean=state.mu[r],
        factor=spec.factor(r),
        precision=precision,
        shift=shift,
        jitter=jitter,
    )


def cond_update_d_r(
    state: ModelState,
    k: int,
    r: int,
    obs: ObservationSet,
    prior: PriorConfig,
    rng: Optional[np.random.Generator] = None,
    jitter: float = 0.0,
) -> np.ndarray:
    """Draw a proposal for d^(r),k from its approximate conditional"""
    rng = state.shapes[k].rng if rng is None else rng
    return d_conditional(state, k, r, obs, prior, jitter).sample(rng)


def _rebuild_from(shape: ShapeState, spec: ShapeProcessSpec, r: int, d: np.ndarray) -> ShapeTrajectory:
    """Exact trajectory with level r replaced; levels below r are reused"""
    deformations = list(shape.deformations)
    deformations[r] = np.asarray(d, dtype=float).ravel()
    polygons = list(shape.trajectory.polygons[:r])
    if r == 0:
        polygons.append(initial_polygon(shape.m, deformations[0]))
    for level in range(max(r, 1), spec.R + 1):
        polygons.append(process_step(polygons[-1], level, spec, deformations[level], strict=False))
    return ShapeTrajectory(m=shape.m, deformations=tuple(deformations), polygons=tuple(polygons))


def data_loglik(c: ControlPolygon, data: ShapeObservations, t: np.ndarray, tau_p: float, tau2: float) -> float:
    value = loglik_points(c, data.points, t, tau_p)
    if data.has_angles:
        value += loglik_orientations(c, t, data.theta, tau2)
    return value


def level_log_target(
    state: ModelState,
    k: int,
    r: int,
    d: np.ndarray,
    obs: ObservationSet,
    prior: PriorConfig,
) -> Tuple[float, Optional[ShapeTrajectory]]:
    """Exact log prior x likelihood of d^(r),k = d, with the trajectory it produces"""
    spec = prior.spec
    shape = state.shapes[k]
    try:
        trajectory = _rebuild_from(shape, spec, r, d)
        value = factor_logpdf(d, state.mu[r], spec.factor(r))
        value += data_loglik(trajectory.final, obs[k], shape.t, state.tau_p, state.tau2)
    except (ShapeModelError, FloatingPointError) as exc:
        logger.debug("Exact target failed at level %d: %s", r, exc)
        return -np.inf, None
    return value, trajectory


def mh_log_ratio(
    state: ModelState,
    k: int,
    r: int,
    proposed: np.ndarray,
    obs: ObservationSet,
    prior: PriorConfig,
    proposal: NormalConditional,
) -> Tuple[float, Optional[ShapeTrajectory]]:
    """log [p(d*) q(d_cur)] - log [p(d_cur) q(d*)] and the trajectory of d*"""
    current = state.shapes[k].deformations[r]
    target_new, trajectory = level_log_target(state, k, r, proposed, obs, prior)
    if not np.isfinite(target_new):
        return -np.inf, None
    target_cur, _ = level_log_target(state, k, r, current, obs, prior)
    if not np.isfinite(target_cur):
        return np.inf, trajectory
    ratio = (target_new - proposal.logpdf(proposed)) - (target_cur - proposal.logpdf(current))
    return float(ratio), trajectory


def mh_correct(
    state: ModelState,
    k: int,
    r: int,
    proposed: np.ndarray,
    obs: ObservationSet,
    prior: PriorConfig,
    proposal: NormalConditional,
    rng: Optional[np.random.Generator] = None,
) -> bool:
    """Independence Metropolis-Hastings step for d^(r),k"""
    spec = prior.spec
    shape = state.shapes[k]
    rng = shape.rng if rng is None else rng
    log_ratio, trajectory = mh_log_ratio(state, k, r, proposed, obs, prior, proposal)
    shape.proposed[r] += 1

    if trajectory is None:
        logger.warning("Rejected level-%d proposal for shape %d: non-finite target", r, k)
        return False
    if not np.log(rng.random()) < log_ratio:
        return False

    shape.deformations[r] = np.asarray(proposed, dtype=float).ravel()
    shape.trajectory = trajectory
    if r >= 1:
        shape.factors[r] = _omega_factor(spec, r, shape.deformations[r], shape.lengths[r])
    shape.accepted[r] += 1
    return True


def tau_p_posterior(state: ModelState, obs: ObservationSet, prior: PriorConfig) -> Tuple[float, float]:
    """Gamma (shape, rate) of the point-noise precision"""
    _check_state(state, obs)
    count = 0
    squares = 0.0
    for shape, data in zip(state.shapes, obs):
        residuals = point_residuals(shape.polygon, data.points, shape.t)
        count += data.count
        squares += float(np.sum(residuals**2))
    return prior.alpha + count, prior.beta + 0.5 * squares


def update_tau_p(state: ModelState, obs: ObservationSet, prior: PriorConfig, rng=None) -> float:
    rng = state.rng if rng is None else rng
    shape, rate = tau_p_posterior(state, obs, prior)
    state.tau_p = float(rng.gamma(shape, 1.0 / rate))
    return state.tau_p


def tau_theta_posterior(state: ModelState, obs: ObservationSet, prior: PriorConfig) -> Tuple[float, float]:
    """Inverse-gamma (shape, scale) of the orientation variance"""
    _check_state(state, obs)
    count = 0
    quadratic = 0.0
    for shape, data in zip(state.shapes, obs):
        if not data.has_angles:
            continue
        s = orientation_residuals(shape.polygon, shape.t, data.theta)
        count += data.count
        quadratic += float(s @ s)
    if count == 0:
        raise DomainError("no orientation data to update the orientation variance")
    return prior.a_tau + 0.5 * count, prior.b_tau + 0.5 * quadratic


def update_tau_theta(state: ModelState, obs: ObservationSet, prior: PriorConfig, rng=None) -> float:
    rng = state.rng if rng is None else rng
    shape, scale = tau_theta_posterior(state, obs, prior)
    state.tau2 = float(invgamma.rvs(shape, scale=scale, random_state=rng))
    return state.tau2


def griddy_log_weights(
    c: ControlPolygon,
    points: np.ndarray,
    tau_p: float,
    grid: GriddySpec,
    theta: Optional[np.ndarray] = None,
    tau2: Optional[float] = None,
) -> np.ndarray:
    """(N, G) unnormalized log conditional of each t_i on the grid"""
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    nodes = grid.grid
    curve = curve_points(c, nodes)
    H = hodograph_points(c, nodes)
    sq = np.sum((points[:, None, :] - curve[None, :, :]) ** 2, axis=-1)
    with np.errstate(divide="ignore"):
        # uniform in arc length is a |H| density in t
        log_speed = np.log(np.hypot(H[:, 0], H[:, 1]))
    weights = -0.5 * tau_p * sq + log_speed[None, :]
    if theta is not None and grid.include_orientation:
        theta = np.asarray(theta, dtype=float).ravel()
        s = np.sin(theta)[:, None] * H[None, :, 0] - np.cos(theta)[:, None] * H[None, :, 1]
        weights = weights - 0.5 * s**2 / tau2
    return weights


def griddy_probabilities(log_weights: np.ndarray) -> np.ndarray:
    """Row-normalize exp(log_weights) after a max shift"""
    log_weights = np.atleast_2d(np.asarray(log_weights, dtype=float))
    peak = np.max(log_weights, axis=1, keepdims=True)
    dead = ~np.isfinite(peak[:, 0])
    with np.errstate(invalid="ignore"):
        probs = np.exp(log_weights - np.where(np.isfinite(peak), peak, 0.0))
    probs[~np.isfinite(probs)] = 0.0
    totals = probs.sum(axis=1)
    dead |= ~(totals > 0)
    if np.any(dead):
        logger.warning("Griddy weights vanished for %d point(s); drawing uniformly", int(dead.sum()))
        probs[dead] = 1.0
        totals = probs.sum(axis=1)
    return probs / totals[:, None]


def _griddy_draw(probs: np.ndarray, grid: GriddySpec, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    idx = np.minimum((cdf < u[:, None]).sum(axis=1), grid.size - 1)
    return grid.grid[idx] + grid.cell * rng.random(probs.shape[0])


def griddy_update_t(
    state: ModelState,
    k: int,
    i: int,
    obs: ObservationSet,
    grid: GriddySpec,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Draw t_i^k from its grid conditional"""
    shape, data = state.shapes[k], obs[k]
    rng = shape.rng if rng is None else rng
    theta = data.theta[i:i + 1] if data.has_angles else None
    weights = griddy_log_weights(shape.polygon, data.points[i:i + 1], state.tau_p, grid, theta, state.tau2)
    shape.t[i] = float(_griddy_draw(griddy_probabilities(weights), grid, rng)[0])
    return shape.t[i]


def griddy_update_all(
    state: ModelState,
    k: int,
    obs: ObservationSet,
    grid: GriddySpec,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Draw every t_i^k at once; the t_i are conditionally independent"""
    shape, data = state.shapes[k], obs[k]
    rng = shape.rng if rng is None else rng
    if data.count == 0:
        return shape.t
    weights = griddy_log_weights(shape.polygon, data.points, state.tau_p, grid, data.theta, state.tau2)
    shape.t = _griddy_draw(griddy_probabilities(weights), grid, rng)
    return shape.t


def mu_conditional(state: ModelState, r: int, prior: PriorConfig) -> NormalConditional:
    spec = prior.spec
    F = spec.factor(r)
    F_pinv = np.linalg.pinv(F)
    sigma_pinv = F_pinv.T @ F_pinv
    total = np.sum([shape.deformations[r] for shape in state.shapes], axis=0)
    return NormalConditional(
        prior_mean=prior.mu_mu[r],
        factor=prior.hyper_factor(r),
        precision=state.K * sigma_pinv,
        shift=sigma_pinv @ total,
    )


def update_mu_r(state: ModelState, r: int, prior: PriorConfig, rng=None) -> np.ndarray:
    """Conjugate draw of the population mean deformation of level r"""
    if state.K < 1:
        raise DomainError("population update needs at least one shape")
    rng = state.rng if rng is None else rng
    spec = prior.spec
    mu = mu_conditional(state, r, prior).sample(rng)

    F = spec.factor(r)
    if F.shape[1] < F.shape[0]:
        # directions outside range(Sigma_r) are pinned by the shapes themselves
        projector = F @ np.linalg.pinv(F)
        mean_d = np.mean([shape.deformations[r] for shape in state.shapes], axis=0)
        mu = projector @ mu + (np.eye(F.shape[0]) - projector) @ mean_d
    state.mu[r] = mu
    return mu


def nearest_parameters(c: ControlPolygon, points: np.ndarray, size: Optional[int] = None) -> np.ndarray:
    """Grid parameter of the closest curve sample for every point"""
    size = settings.griddy_grid_size if size is None else size
    nodes = np.linspace(-np.pi, np.pi, size, endpoint=False)
    curve = curve_points(c, nodes)
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    sq = np.sum((points[:, None, :] - curve[None, :, :]) ** 2, axis=-1)
    return nodes[np.argmin(sq, axis=1)] if points.size else np.zeros(0)


def _project(target: np.ndarray, mean: np.ndarray, factor: np.ndarray) -> np.ndarray:
    """Closest point to target on mean + range(F)"""
    if factor.shape[1] == 0:
        return mean.copy()
    return mean + factor @ _latent(target, mean, factor)


def initial_state(
    obs: ObservationSet,
    prior: PriorConfig,
    seed=None,
    grid: Optional[GriddySpec] = None,
    population: Optional[bool] = None,
) -> ModelState:
    """Circle through each cloud's centroid with the cloud's mean radius"""
    if not obs:
        raise DomainError("at least one observation set is required")
    spec = prior.spec
    grid = grid or GriddySpec()
    population = len(obs) > 1 if population is None else population
    seed_seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    streams = seed_seq.spawn(len(obs) + 1)

    mu = [m.copy() for m in spec.mu]
    shapes = []
    for k, data in enumerate(obs):
        if data.count < 3:
            raise DomainError(f"shape {k} has {data.count} points; at least 3 are required")
        centroid = data.points.mean(axis=0)
        radius = float(np.mean(np.linalg.norm(data.points - centroid, axis=1))) or 1.0
        m = centroid.copy()
        # three control points at radius 2 rho trace a circle of radius rho
        d0 = _project(np.tile([0.0, 2.0 * radius], 3), mu[0], spec.factor(0))
        shape = ShapeState(
            m=m,
            deformations=[d0] + [mu[r].copy() for r in range(1, spec.R + 1)],
            t=np.zeros(data.count),
            rng=np.random.default_rng(streams[k]),
            accepted=np.zeros(spec.R + 1),
            proposed=np.zeros(spec.R + 1),
        )
        refresh_caches(shape, spec)
        shape.t = nearest_parameters(shape.polygon, data.points, grid.size)
        shapes.append(shape)

    squares = sum(float(np.sum(point_residuals(s.polygon, d.points, s.t) ** 2)) for s, d in zip(shapes, obs))
    count = sum(d.count for d in obs)
    tau_p = 1.0 / max(0.5 * squares / count, 1e-12)

    quadratic, angle_count = 0.0, 0
    for s, d in zip(shapes, obs):
        if d.has_angles:
            res = orientation_residuals(s.polygon, s.t, d.theta)
            quadratic += float(res @ res)
            angle_count += d.count
    if angle_count:
        tau2 = max(quadratic / angle_count, 1e-12)
    else:
        tau2 = prior.b_tau / (prior.a_tau + 1.0)

    state = ModelState(
        shapes=shapes,
        mu=mu,
        tau_p=tau_p,
        tau2=tau2,
        rng=np.random.default_rng(streams[-1]),
        population=population,
    )
    logger.info("Initialized %d shape(s): tau_p=%.4g tau2=%.4g", len(shapes), tau_p, tau2)
    return state


def log_posterior(state: ModelState, obs: ObservationSet, prior: PriorConfig) -> float:
    """Joint log density of the current state, up to the normalizing constant"""
    _check_state(state, obs)
    spec = prior.spec
    total = 0.0
    for shape, data in zip(state.shapes, obs):
        c = shape.polygon
        total += data_loglik(c, data, shape.t, state.tau_p, state.tau2)
        total += factor_logpdf(shape.m, spec.mu_m, spec.factor_m)
        for r in range(spec.R + 1):
            total += factor_logpdf(shape.deformations[r], state.mu[r], spec.factor(r))
        H = hodograph_points(c, shape.t)
        total += float(np.sum(np.log(np.hypot(H[:, 0], H[:, 1])))) - data.count * np.log(total_length(c))

    total += float(gamma.logpdf(state.tau_p, prior.alpha, scale=1.0 / prior.beta))
    if any(d.has_angles for d in obs):
        total += float(invgamma.logpdf(state.tau2, prior.a_tau, scale=prior.b_tau))
    if state.population:
        for r in range(spec.R + 1):
            total += factor_logpdf(state.mu[r], prior.mu_mu[r], prior.hyper_factor(r))
    return float(total)
