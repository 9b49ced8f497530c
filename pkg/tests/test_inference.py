import logging

import numpy as np
import pytest
from scipy.integrate import cumulative_trapezoid, trapezoid
from scipy.stats import gamma, invgamma

from app.errors import ConfigError, DomainError
from app.services import inference
from app.services.curves import ControlPolygon, curve_points, design_matrix, hodograph_points
from app.services.deformation import orienting_block_approx, orienting_block_exact
from app.services.inference import (
    GriddySpec,
    PriorConfig,
    ShapeObservations,
    composite_omega,
    cond_update_m,
    conditional_normal,
    d_conditional,
    factor_logpdf,
    griddy_log_weights,
    griddy_probabilities,
    griddy_update_all,
    griddy_update_t,
    initial_state,
    level_log_target,
    log_posterior,
    m_conditional,
    mh_correct,
    mh_log_ratio,
    mu_conditional,
    nearest_parameters,
    refresh_caches,
    tau_p_posterior,
    tau_theta_posterior,
    update_mu_r,
    update_tau_p,
    update_tau_theta,
)
from app.services.likelihood import loglik_orientations, loglik_points
from app.services.shape_process import (
    ShapeProcessSpec,
    initial_polygon,
    sample_shape,
    trajectory_from_deformations,
)


def _exact_obs(state, k: int = 0, theta: bool = False, offset=None) -> ShapeObservations:
    """Observations lying exactly on shape k's current curve at its current parameters"""
    shape = state.shapes[k]
    points = curve_points(shape.polygon, shape.t)
    if offset is not None:
        points = points.copy()
        points[0] += offset
    angles = None
    if theta:
        H = hodograph_points(shape.polygon, shape.t)
        angles = np.arctan2(H[:, 1], H[:, 0])
    return ShapeObservations(points=points, theta=angles)


def test_prior_validation(two_level_spec) -> None:
    with pytest.raises(ConfigError):
        PriorConfig(spec=two_level_spec, alpha=0.0)
    with pytest.raises(ConfigError):
        GriddySpec(size=1)
    prior = PriorConfig(spec=two_level_spec, hyper_variance=9.0)
    assert np.allclose(prior.sigma_mu[1], 9.0 * np.eye(14))


def test_initial_state(circle_obs, two_level_prior) -> None:
    state = initial_state([circle_obs], two_level_prior, seed=3)
    shape = state.shapes[0]
    assert shape.polygon.degree == 3
    assert np.allclose(shape.m, circle_obs.points.mean(axis=0))
    assert np.all((shape.t >= -np.pi) & (shape.t < np.pi))
    assert state.tau_p > 0 and state.tau2 > 0
    assert not state.population
    with pytest.raises(DomainError):
        initial_state([ShapeObservations(points=np.zeros((2, 2)))], two_level_prior)


def test_nearest_parameters(make_circle) -> None:
    c = make_circle(1.0)
    t = np.array([-2.0, 0.3, 1.7])
    found = nearest_parameters(c, curve_points(c, t), size=4096)
    assert np.allclose(found, t, atol=2 * np.pi / 4096)


def test_composite_omega(circle_obs) -> None:
    spec = ShapeProcessSpec.isotropic(degrees=(1, 2, 4), variances=(1.0, 0.1, 0.1), mu0=np.tile([0.0, 2.0], 3))
    prior = PriorConfig(spec=spec)
    state = initial_state([circle_obs], prior, seed=0)
    shape = state.shapes[0]
    rng = np.random.default_rng(1)
    shape.deformations = [shape.deformations[0]] + [0.1 * rng.standard_normal(d.size) for d in shape.deformations[1:]]
    refresh_caches(shape, spec)

    assert np.array_equal(composite_omega(shape, spec, 3, 2), np.eye(18))
    assert np.array_equal(composite_omega(shape, spec, 1, 1), shape.factors[1])

    c = initial_polygon(shape.m, shape.deformations[0])
    for r in (1, 2):
        elevated = ControlPolygon(degree=spec.degrees[r], coords=spec.elevation(r) @ c.coords)
        moved = elevated.coords + orienting_block_approx(elevated, shape.lengths[r]).apply(shape.deformations[r])
        c = ControlPolygon(degree=spec.degrees[r], coords=moved)
    c0 = initial_polygon(shape.m, shape.deformations[0])
    assert np.allclose(composite_omega(shape, spec, 1, 2) @ c0.coords, c.coords, atol=1e-10)


def test_empty_regression_returns_the_prior(rng) -> None:
    mean = rng.standard_normal(4)
    A = rng.standard_normal((4, 4))
    cov = A @ A.T + np.eye(4)
    cond = conditional_normal(np.zeros((6, 4)), np.zeros(6), 2.0, mean, cov)
    assert np.allclose(cond.mean, mean)
    assert np.allclose(cond.covariance, cov)


def test_flat_prior_gives_least_squares(rng) -> None:
    Q = rng.standard_normal((20, 2))
    y = rng.standard_normal(20)
    cond = conditional_normal(Q, y, 1.0, np.zeros(2), 1e12 * np.eye(2))
    expected, *_ = np.linalg.lstsq(Q, y, rcond=None)
    assert np.allclose(cond.mean, expected, rtol=1e-4)


def test_vanishing_prior_pins_the_mean(rng) -> None:
    mean = np.array([1.0, -2.0])
    cond = conditional_normal(rng.standard_normal((8, 2)), rng.standard_normal(8), 1.0, mean, 1e-12 * np.eye(2))
    assert np.allclose(cond.sample(rng), mean, atol=1e-5)


def test_top_level_conditional_is_the_regression_posterior(circle_obs, two_level_prior) -> None:
    state = initial_state([circle_obs], two_level_prior, seed=2)
    spec = two_level_prior.spec
    shape = state.shapes[0]
    refresh_caches(shape, spec)

    cond = d_conditional(state, 0, 1, [circle_obs], two_level_prior)

    c_prev = shape.trajectory.polygons[0]
    elevated = spec.elevation(1) @ c_prev.coords
    T = orienting_block_exact(ControlPolygon(degree=3, coords=elevated)).matrix
    X = design_matrix(3, shape.t)
    Q = X @ T
    y = circle_obs.stacked - X @ elevated
    prior_precision = np.linalg.inv(spec.sigma[1])
    cov = np.linalg.inv(prior_precision + state.tau_p * Q.T @ Q)
    mean = cov @ (prior_precision @ state.mu[1] + state.tau_p * Q.T @ y)
    assert np.allclose(cond.mean, mean, rtol=1e-8, atol=1e-10)
    assert np.allclose(cond.covariance, cov, rtol=1e-8, atol=1e-12)


def test_tau_p_posterior(circle_obs, two_level_prior) -> None:
    state = initial_state([circle_obs], two_level_prior, seed=0)
    exact = _exact_obs(state)
    shape_param, rate = tau_p_posterior(state, [exact], two_level_prior)
    assert shape_param == two_level_prior.alpha + exact.count
    assert rate == two_level_prior.beta

    shifted = _exact_obs(state, offset=np.array([1.0, 1.0]))
    _, rate = tau_p_posterior(state, [shifted], two_level_prior)
    assert rate == pytest.approx(two_level_prior.beta + 1.0, abs=1e-12)

    # scipy's parameterization matches tau^(shape-1) exp(-rate tau)
    taus = np.linspace(0.1, 5.0, 20)
    kernel = (shape_param - 1) * np.log(taus) - rate * taus
    diff = gamma.logpdf(taus, shape_param, scale=1.0 / rate) - kernel
    assert np.ptp(diff) < 1e-10

    draw = update_tau_p(state, [shifted], two_level_prior)
    assert draw > 0 and state.tau_p == draw


def test_tau_theta_posterior(circle_obs, two_level_prior) -> None:
    state = initial_state([circle_obs], two_level_prior, seed=0)
    exact = _exact_obs(state, theta=True)
    shape_param, scale = tau_theta_posterior(state, [exact], two_level_prior)
    assert shape_param == two_level_prior.a_tau + exact.count / 2
    assert scale == pytest.approx(two_level_prior.b_tau, abs=1e-12)
    assert update_tau_theta(state, [exact], two_level_prior) > 0
    with pytest.raises(DomainError):
        tau_theta_posterior(state, [circle_obs], two_level_prior)


def test_griddy_probabilities(caplog) -> None:
    assert np.allclose(griddy_probabilities(np.array([[0.0, 0.0]])), [[0.5, 0.5]])
    probs = griddy_probabilities(np.array([[-1000.0, -1001.0, -999.0], [3.0, 1.0, 2.0]]))
    assert np.allclose(probs.sum(axis=1), 1.0)
    with caplog.at_level(logging.WARNING):
        dead = griddy_probabilities(np.array([[-np.inf, -np.inf, -np.inf, -np.inf]]))
    assert np.allclose(dead, 0.25)
    assert "drawing uniformly" in caplog.text


def test_griddy_grid_resolution(make_circle) -> None:
    c = make_circle(1.0)
    point = np.array([[0.3, 0.2]])
    coarse = griddy_probabilities(griddy_log_weights(c, point, 1.0, GriddySpec(size=256)))[0]
    fine = griddy_probabilities(griddy_log_weights(c, point, 1.0, GriddySpec(size=4096)))[0]
    binned = fine.reshape(256, 16).sum(axis=1)
    assert 0.5 * np.sum(np.abs(coarse - binned)) < 0.01


def test_griddy_orientation_term(make_circle) -> None:
    c = make_circle(1.0)
    point = np.array([[0.0, 0.0]])
    theta = np.array([0.0])
    grid = GriddySpec(size=64, include_orientation=True)
    with_angles = griddy_log_weights(c, point, 1.0, grid, theta, 0.1)
    without = griddy_log_weights(c, point, 1.0, GriddySpec(size=64, include_orientation=False), theta, 0.1)
    assert not np.allclose(with_angles, without)
    assert np.allclose(without, griddy_log_weights(c, point, 1.0, grid))


def test_griddy_updates_stay_in_range(circle_obs, two_level_prior) -> None:
    state = initial_state([circle_obs], two_level_prior, seed=0)
    grid = GriddySpec(size=64)
    t = griddy_update_all(state, 0, [circle_obs], grid)
    assert t.shape == (circle_obs.count,)
    assert np.all((t >= -np.pi) & (t < np.pi))
    value = griddy_update_t(state, 0, 3, [circle_obs], grid)
    assert -np.pi <= value < np.pi
    assert state.shapes[0].t[3] == value


def _population_state(circle_points, prior, count: int = 3):
    obs = [
        ShapeObservations(points=circle_points(1.0 + 0.2 * k, 20, center=(k, 0.0), noise=0.01))
        for k in range(count)
    ]
    return initial_state(obs, prior, seed=9), obs


def test_mu_pinned_by_a_vanishing_hyperprior(circle_points, two_level_spec) -> None:
    sizes = (6, 14)
    target = (np.full(6, 0.5), np.full(14, -0.1))
    prior = PriorConfig(spec=two_level_spec, mu_mu=target, sigma_mu=tuple(np.zeros((s, s)) for s in sizes))
    state, _ = _population_state(circle_points, prior)
    for r in (0, 1):
        assert np.allclose(update_mu_r(state, r, prior), target[r])


def test_mu_with_flat_hyperprior_follows_the_shape(circle_points, two_level_spec) -> None:
    prior = PriorConfig(spec=two_level_spec, hyper_variance=1e12)
    state, _ = _population_state(circle_points, prior, count=1)
    state.shapes[0].deformations[1] = np.linspace(-0.2, 0.2, 14)
    cond = mu_conditional(state, 1, prior)
    assert np.allclose(cond.mean, state.shapes[0].deformations[1], atol=1e-4)


def test_mu_is_permutation_invariant(circle_points, two_level_prior) -> None:
    state, _ = _population_state(circle_points, two_level_prior)
    forward = mu_conditional(state, 0, two_level_prior).mean
    state.shapes.reverse()
    backward = mu_conditional(state, 0, two_level_prior).mean
    assert np.allclose(forward, backward, atol=1e-12)


def test_mh_accepts_an_unchanged_proposal(circle_obs, two_level_prior) -> None:
    state = initial_state([circle_obs], two_level_prior, seed=4)
    shape = state.shapes[0]
    for r in (0, 1):
        proposal = d_conditional(state, 0, r, [circle_obs], two_level_prior)
        current = shape.deformations[r].copy()
        ratio, _ = mh_log_ratio(state, 0, r, current, [circle_obs], two_level_prior, proposal)
        assert ratio == 0.0
        assert mh_correct(state, 0, r, current, [circle_obs], two_level_prior, proposal)
    assert np.all(shape.accepted == shape.proposed)


def test_mh_is_exact_when_the_model_is_linear(circle_obs, two_level_prior) -> None:
    # with zero refinements above the proposed level the linearization is exact
    state = initial_state([circle_obs], two_level_prior, seed=6)
    rng = np.random.default_rng(0)
    for r in (1, 0):
        proposal = d_conditional(state, 0, r, [circle_obs], two_level_prior)
        for _ in range(5):
            ratio, _ = mh_log_ratio(state, 0, r, proposal.sample(rng), [circle_obs], two_level_prior, proposal)
            assert abs(ratio) < 1e-6


def test_mh_rejects_non_finite_targets(circle_obs, two_level_prior, monkeypatch, caplog) -> None:
    state = initial_state([circle_obs], two_level_prior, seed=4)
    proposal = d_conditional(state, 0, 1, [circle_obs], two_level_prior)
    before = state.shapes[0].deformations[1].copy()
    monkeypatch.setattr(inference, "level_log_target", lambda *args: (-np.inf, None))
    with caplog.at_level(logging.WARNING):
        accepted = mh_correct(state, 0, 1, proposal.sample(np.random.default_rng(0)), [circle_obs], two_level_prior, proposal)
    assert not accepted
    assert np.array_equal(state.shapes[0].deformations[1], before)
    assert "non-finite target" in caplog.text


def test_log_posterior_is_finite(circle_points, two_level_prior) -> None:
    state, obs = _population_state(circle_points, two_level_prior)
    assert state.population
    assert np.isfinite(log_posterior(state, obs, two_level_prior))


def test_snapshot_restore_keeps_generators(circle_obs, two_level_prior) -> None:
    state = initial_state([circle_obs], two_level_prior, seed=1)
    snapshot = state.snapshot()
    rng = state.shapes[0].rng
    state.shapes[0].m = state.shapes[0].m + 5.0
    state.tau_p = 123.0
    state.restore(snapshot)
    assert np.allclose(state.shapes[0].m, snapshot.shapes[0].m)
    assert state.tau_p == snapshot.tau_p
    assert state.shapes[0].rng is rng


def _tiny_instance():
    """Degree-(1, 3) shape seen at five points with noisy tangent angles"""
    spec = ShapeProcessSpec.isotropic(
        degrees=(1, 3),
        variances=(0.25, 0.01),
        mu0=np.tile([0.0, 2.0], 3),
        sigma_m=0.5 * np.eye(2),
    )
    prior = PriorConfig(spec=spec, alpha=2.0, beta=1.0, a_tau=3.0, b_tau=0.05)
    rng = np.random.default_rng(5)
    truth = sample_shape(spec, rng).final
    t = np.linspace(-np.pi, np.pi, 5, endpoint=False) + 0.1
    H = hodograph_points(truth, t)
    obs = [
        ShapeObservations(
            points=curve_points(truth, t) + 0.05 * rng.standard_normal((5, 2)),
            theta=np.arctan2(H[:, 1], H[:, 0]) + 0.05 * rng.standard_normal(5),
        )
    ]
    state = initial_state(obs, prior, seed=0)
    shape = state.shapes[0]
    shape.deformations[1] = 0.1 * rng.standard_normal(14)
    refresh_caches(shape, spec)
    shape.t = t.copy()
    state.tau_p, state.tau2 = 100.0, 0.01
    return state, obs, prior


def _assert_moments(draws: np.ndarray, mean: np.ndarray, var: np.ndarray) -> None:
    """Sample mean and variance within three Monte Carlo standard errors"""
    n = draws.shape[0]
    centered = draws - draws.mean(axis=0)
    sample_var = np.mean(centered**2, axis=0)
    fourth = np.mean(centered**4, axis=0)
    assert np.all(np.abs(draws.mean(axis=0) - mean) < 3.0 * np.sqrt(sample_var / n))
    assert np.all(np.abs(sample_var - var) < 3.0 * np.sqrt((fourth - sample_var**2) / n))


def _quadrature_moments(nodes: np.ndarray, log_kernel: np.ndarray):
    density = np.exp(log_kernel - np.max(log_kernel))
    total = trapezoid(density, nodes)
    mean = trapezoid(nodes * density, nodes) / total
    return mean, trapezoid((nodes - mean) ** 2 * density, nodes) / total


def test_center_conditional_is_conjugate() -> None:
    state, obs, prior = _tiny_instance()
    spec, shape, data = prior.spec, state.shapes[0], obs[0]
    cond = m_conditional(state, 0, obs, prior)

    precision = np.linalg.inv(spec.sigma_m) + data.count * state.tau_p * np.eye(2)
    residuals = data.points - curve_points(shape.polygon, shape.t) + shape.m
    shift = np.linalg.solve(spec.sigma_m, spec.mu_m) + state.tau_p * residuals.sum(axis=0)
    assert np.allclose(cond.covariance, np.linalg.inv(precision), rtol=1e-8, atol=1e-12)
    assert np.allclose(cond.mean, np.linalg.solve(precision, shift), rtol=1e-8, atol=1e-10)


def test_center_conditional_without_data_is_the_prior() -> None:
    state, obs, prior = _tiny_instance()
    state.tau_p = 1e-14
    cond = m_conditional(state, 0, obs, prior)
    assert np.allclose(cond.mean, prior.spec.mu_m, atol=1e-6)
    assert np.allclose(cond.covariance, prior.spec.sigma_m, rtol=1e-6)


def test_center_update_rebuilds_the_trajectory(circle_obs) -> None:
    spec = ShapeProcessSpec.isotropic(
        degrees=(1, 3), variances=(4.0, 0.01), mu0=np.tile([0.0, 2.0], 3), mu_m=np.array([0.5, -0.25])
    )
    prior = PriorConfig(spec=spec)
    state = initial_state([circle_obs], prior, seed=0)
    m = cond_update_m(state, 0, [circle_obs], prior)
    assert np.array_equal(m, [0.5, -0.25])
    assert np.array_equal(state.shapes[0].trajectory.m, m)


def test_noise_posteriors_match_their_kernels() -> None:
    state, obs, prior = _tiny_instance()
    shape, data = state.shapes[0], obs[0]

    shape_param, rate = tau_p_posterior(state, obs, prior)
    diff = [
        gamma.logpdf(tau, prior.alpha, scale=1.0 / prior.beta)
        + loglik_points(shape.polygon, data.points, shape.t, tau)
        - gamma.logpdf(tau, shape_param, scale=1.0 / rate)
        for tau in np.linspace(0.1, 50.0, 40)
    ]
    assert np.ptp(diff) < 1e-10

    shape_param, scale = tau_theta_posterior(state, obs, prior)
    diff = [
        invgamma.logpdf(tau2, prior.a_tau, scale=prior.b_tau)
        + loglik_orientations(shape.polygon, shape.t, data.theta, tau2)
        - invgamma.logpdf(tau2, shape_param, scale=scale)
        for tau2 in np.linspace(0.01, 2.0, 40)
    ]
    assert np.ptp(diff) < 1e-10


def test_griddy_draws_match_the_grid_conditional() -> None:
    state, obs, _ = _tiny_instance()
    shape, data = state.shapes[0], obs[0]
    grid = GriddySpec(size=64)
    weights = griddy_log_weights(shape.polygon, data.points, state.tau_p, grid, data.theta, state.tau2)
    probs = griddy_probabilities(weights)

    # each draw is a node plus a uniform offset inside its cell
    nodes, cell = grid.grid, grid.cell
    mean = probs @ (nodes + 0.5 * cell)
    second = probs @ (nodes**2 + nodes * cell + cell**2 / 3.0)

    rng = np.random.default_rng(22)
    chunks = [
        inference._griddy_draw(np.repeat(probs, 20_000, axis=0), grid, rng).reshape(data.count, 20_000)
        for _ in range(10)
    ]
    _assert_moments(np.concatenate(chunks, axis=1).T, mean, second - mean**2)


@pytest.mark.slow
def test_center_draws_match_quadrature() -> None:
    state, obs, prior = _tiny_instance()
    spec, shape, data = prior.spec, state.shapes[0], obs[0]
    cond = m_conditional(state, 0, obs, prior)
    rng = np.random.default_rng(21)
    draws = np.array([cond.sample(rng) for _ in range(200_000)])

    def log_target(m: np.ndarray) -> float:
        final = trajectory_from_deformations(spec, m, shape.deformations, strict=False).final
        return factor_logpdf(m, spec.mu_m, spec.factor_m) + loglik_points(final, data.points, shape.t, state.tau_p)

    center, spread = draws.mean(axis=0), draws.std(axis=0)
    xs = center[0] + spread[0] * np.linspace(-8.0, 8.0, 161)
    ys = center[1] + spread[1] * np.linspace(-8.0, 8.0, 161)
    values = np.array([[log_target(np.array([x, y])) for y in ys] for x in xs])
    weights = np.exp(values - values.max())
    weights /= weights.sum()
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    mean = np.array([np.sum(weights * X), np.sum(weights * Y)])
    var = np.array([np.sum(weights * (X - mean[0]) ** 2), np.sum(weights * (Y - mean[1]) ** 2)])
    _assert_moments(draws, mean, var)


@pytest.mark.slow
def test_noise_draws_match_quadrature() -> None:
    state, obs, prior = _tiny_instance()
    shape, data = state.shapes[0], obs[0]
    rng = np.random.default_rng(23)

    draws = np.array([update_tau_p(state, obs, prior, rng) for _ in range(200_000)])
    nodes = np.geomspace(draws.min() / 10.0, draws.max() * 10.0, 20_001)
    log_kernel = gamma.logpdf(nodes, prior.alpha, scale=1.0 / prior.beta) + np.array(
        [loglik_points(shape.polygon, data.points, shape.t, tau) for tau in nodes]
    )
    _assert_moments(draws, *_quadrature_moments(nodes, log_kernel))

    draws = np.array([update_tau_theta(state, obs, prior, rng) for _ in range(200_000)])
    nodes = np.geomspace(draws.min() / 10.0, draws.max() * 10.0, 20_001)
    log_kernel = invgamma.logpdf(nodes, prior.a_tau, scale=prior.b_tau) + np.array(
        [loglik_orientations(shape.polygon, shape.t, data.theta, tau2) for tau2 in nodes]
    )
    _assert_moments(draws, *_quadrature_moments(nodes, log_kernel))


@pytest.mark.slow
def test_mh_chain_matches_the_grid_posterior() -> None:
    # one free direction at level 0 and a fixed level-1 push make the exact target non-Gaussian
    u = np.zeros(6)
    u[1] = 1.0
    mu0, mu1 = np.tile([0.0, 2.0], 3), np.tile([0.0, 0.3], 7)
    spec = ShapeProcessSpec(degrees=(1, 3), mu=(mu0, mu1), sigma=(0.25 * np.outer(u, u), np.zeros((14, 14))))
    prior = PriorConfig(spec=spec)

    rng = np.random.default_rng(31)
    t = np.linspace(-np.pi, np.pi, 5, endpoint=False) + 0.1
    truth = trajectory_from_deformations(spec, np.zeros(2), [mu0 + 0.4 * u, mu1]).final
    obs = [ShapeObservations(points=curve_points(truth, t) + 0.05 * rng.standard_normal((5, 2)))]

    state = initial_state(obs, prior, seed=0)
    shape = state.shapes[0]
    shape.m = np.zeros(2)
    shape.t = t.copy()
    refresh_caches(shape, spec)
    state.tau_p = 400.0
    proposal = d_conditional(state, 0, 0, obs, prior)

    steps = 200_000
    xs = np.empty(steps)
    for i in range(steps):
        mh_correct(state, 0, 0, proposal.sample(rng), obs, prior, proposal, rng=rng)
        xs[i] = u @ (shape.deformations[0] - mu0)
    xs = xs[1000:]
    assert shape.accepted[0] > 0

    center = u @ (proposal.mean - mu0)
    spread = np.sqrt(u @ proposal.covariance @ u)
    nodes = np.linspace(min(center - 12.0 * spread, xs.min()), max(center + 12.0 * spread, xs.max()), 4001)
    values = np.array([level_log_target(state, 0, 0, mu0 + x * u, obs, prior)[0] for x in nodes])
    cdf = cumulative_trapezoid(np.exp(values - values.max()), nodes, initial=0.0)
    edges = np.interp(np.arange(1, 20) / 20.0, cdf / cdf[-1], nodes)

    frequencies = np.bincount(np.searchsorted(edges, xs), minlength=20) / xs.size
    assert 0.5 * np.sum(np.abs(frequencies - 0.05)) < 0.02
