import math
import numpy as np
import pytest
from mkvfbsde.coefficients import CoefficientSet
from mkvfbsde.exceptions import ConfigurationError, ContinuationError, DivergenceError, DomainError
from mkvfbsde.field import DecouplingField, GridSpec
from mkvfbsde.fixed_point import (
    IterationState,
    MultiStartResult,
    SolverConfig,
    blend_flows,
    continuation_solve,
    default_init,
    diffusion_flow,
    multi_start,
    phi_map,
    random_init,
    solve,
)
from mkvfbsde.measure import MeasureFlow, diamond, flow_distance, weighted_sup_distance
from mkvfbsde.problems import counterexample, counterexample_init, decoupled_oracle


@pytest.fixture
def decoupled(small_config):
    coefficients, reference = decoupled_oracle(0.5)
    return coefficients, small_config, reference


@pytest.mark.parametrize(
    "changes,field",
    [
        ({"theta": 0.0}, "solver.theta"),
        ({"theta": 1.5}, "solver.theta"),
        ({"tol_u": -1.0}, "solver.tol_u"),
        ({"max_iters": 0}, "solver.max_iters"),
        ({"truncation_ladder": (2.0, 1.0)}, "solver.truncation_ladder"),
        ({"x0": (9.0,)}, "solver.x0"),
        ({"x0": (0.0, 0.0)}, "solver.x0"),
        ({"particles": 1}, "solver.particles"),
        ({"w2_cap": 0}, "w2.cap"),
    ],
)
def test_invalid_configuration(small_config, changes, field):
    with pytest.raises(ConfigurationError) as error:
        small_config.replace(**changes)
    assert error.value.field == field


def test_default_fourth_moment_bound(small_config):
    assert small_config.gamma_prime_for(2.0) == pytest.approx(8 * (2 + 2) ** 4)
    assert small_config.replace(gamma_prime=3.0).gamma_prime_for(2.0) == 3.0


def test_configuration_echo(small_config):
    echo = small_config.to_dict()
    assert echo["x0"] == [0.0]
    assert echo["grid"]["n_t"] == 20
    assert echo["theta"] == 0.5


def test_default_init(decoupled):
    c, cfg, _ = decoupled
    state = default_init(c, cfg)

    np.testing.assert_array_equal(state.phi.values, 0.5)
    assert len(state.mu_flow) == cfg.grid.n_t + 1
    np.testing.assert_array_equal(state.mu_flow[0].points, 0.0)


def test_diffusion_flow_drift(small_config):
    drift = small_config.grid.times[:, None] * 2.0
    flow = diffusion_flow(small_config, np.eye(1), 1, drift=drift)
    np.testing.assert_allclose(flow.means()[:, 0], drift[:, 0], atol=1e-12)


def test_decoupled_output_ignores_input(decoupled):
    c, cfg, _ = decoupled
    first = phi_map(default_init(c, cfg), c, cfg)
    second = phi_map(random_init(c, cfg, 3), c, cfg)

    np.testing.assert_array_equal(first[0].values, second[0].values)
    np.testing.assert_array_equal(first[1].stack(), second[1].stack())


def test_zero_backward_data_gives_zero_field(brownian, small_config):
    c = brownian(B=0.3)
    u, _ = phi_map(random_init(c, small_config, 1), c, small_config)
    np.testing.assert_array_equal(u.values, 0.0)


def test_counterexample_family_is_nearly_fixed(counterexample_small):
    coefficients, cfg, reference = counterexample_small
    state = counterexample_init(cfg, 1.0)
    u, law = phi_map(state, coefficients, cfg)

    x0 = np.zeros((1, 1))
    drift = max(
        abs(u.interpolate(k, x0)[0, 0] - math.cos(t)) for k, t in enumerate(cfg.grid.times)
    )
    assert drift < 2e-2
    np.testing.assert_allclose(law.means()[:, 0], np.sin(cfg.grid.times), atol=2e-2)


def test_decoupled_converges_in_two_iterations(decoupled):
    c, cfg, _ = decoupled
    bundle = solve(c, cfg)

    assert bundle.converged
    assert bundle.iterations == 2
    assert [delta_u for delta_u, _ in bundle.history] == [0.0, 0.0]
    np.testing.assert_array_equal(bundle.mean_y(), 0.5)
    assert bundle.diagnostics["bsde_residual"] == 0.0
    assert len(bundle.diagnostics["reflections"]) == 2


def test_decoupled_variance(decoupled):
    c, cfg, _ = decoupled
    bundle = solve(c, cfg)
    tolerance = 5 * math.sqrt(2 / cfg.particles)
    assert bundle.paths.X[:, -1, 0].var() == pytest.approx(1.0, rel=tolerance)


def test_non_convergence_is_reported(counterexample_small):
    coefficients, cfg, _ = counterexample_small
    bundle = solve(coefficients, cfg.replace(max_iters=1), init=counterexample_init(cfg, 1.0))

    assert not bundle.converged
    assert bundle.iterations == 1
    assert len(bundle.history) == 1


def test_field_cap_breach_is_a_divergence(decoupled):
    c, cfg, _ = decoupled
    with pytest.raises(DivergenceError) as error:
        solve(c, cfg.replace(gamma_cap=0.1))
    assert error.value.iteration == 1
    assert error.value.dump["sup_norm"] == 0.5


def test_moment_cap_breach_is_a_divergence(decoupled):
    c, cfg, _ = decoupled
    with pytest.raises(DivergenceError, match="E\\[sup"):
        solve(c, cfg.replace(gamma_prime=1e-3))


def test_counterexample_at_one(counterexample_small):
    coefficients, cfg, _ = counterexample_small
    bundle = solve(coefficients, cfg, init=counterexample_init(cfg, 1.0))
    times = cfg.grid.times

    assert bundle.converged
    assert np.max(np.abs(bundle.mean_y()[:, 0] - np.cos(times))) <= 5e-2
    assert np.max(np.abs(bundle.mean_x()[:, 0] - np.sin(times))) <= 5e-2


def test_counterexample_at_zero(counterexample_small):
    coefficients, cfg, _ = counterexample_small
    bundle = solve(coefficients, cfg, init=counterexample_init(cfg, 0.0))

    assert bundle.converged
    assert np.max(np.abs(bundle.mean_y())) <= 2e-2


def test_converged_bundle_is_consistent(counterexample_small):
    coefficients, cfg, _ = counterexample_small
    bundle = solve(coefficients, cfg, init=counterexample_init(cfg, 1.0))

    assert bundle.consistency_gap() == 0.0
    for k in (0, 10, cfg.grid.n_t):
        lifted = diamond(lambda x, k=k: bundle.field.interpolate(k, x), bundle.flow[k])
        np.testing.assert_array_equal(lifted.points, bundle.paths.joint_cloud(k).points)


@pytest.mark.parametrize("problem", ["decoupled", "counterexample"])
def test_fixed_point_certificate(problem, decoupled, counterexample_small):
    if problem == "decoupled":
        c, cfg, _ = decoupled
        init = None
    else:
        c, cfg, _ = counterexample_small
        init = counterexample_init(cfg, 1.0)

    bundle = solve(c, cfg, init=init)
    u, law = phi_map(IterationState(bundle.field, bundle.flow), c, cfg)

    bound = 3 * (cfg.tol_u + cfg.tol_flow)
    assert weighted_sup_distance(u, bundle.field) < bound
    assert flow_distance(law, bundle.flow, **cfg.w2_options()) < bound


def test_solve_is_deterministic(counterexample_small):
    coefficients, cfg, _ = counterexample_small
    first = solve(coefficients, cfg, init=counterexample_init(cfg, 1.0))
    second = solve(coefficients, cfg, init=counterexample_init(cfg, 1.0))

    np.testing.assert_array_equal(first.field.values, second.field.values)
    np.testing.assert_array_equal(first.paths.X, second.paths.X)
    assert first.history == second.history


@pytest.mark.parametrize("theta", [0.3, 1.0])
def test_damping_keeps_fixed_points(decoupled, theta):
    c, cfg, _ = decoupled
    bundle = solve(c, cfg)
    again = solve(c, cfg.replace(theta=theta), init=(bundle.field, bundle.flow))

    assert again.converged
    assert again.iterations == 2


def test_blending_replaces_a_share_of_particles(small_config, faker):
    times = small_config.grid.times
    old = MeasureFlow.from_paths(times, np.zeros((100, len(times), 1)))
    new = MeasureFlow.from_paths(times, np.ones((100, len(times), 1)))
    seed, iteration = faker.pyint(), faker.pyint(min_value=1)

    mixed = blend_flows(old, new, 0.3, seed, iteration)

    assert mixed.stack().sum(axis=0)[0, 0] == 30
    # The same particles are replaced at every time.
    np.testing.assert_array_equal(mixed.stack()[:, 0], mixed.stack()[:, -1])
    again = blend_flows(old, new, 0.3, seed, iteration)
    np.testing.assert_array_equal(mixed.stack(), again.stack())
    assert blend_flows(old, new, 1.0, seed, iteration) is new


def test_continuation_with_inactive_truncation_equals_direct_solve(decoupled):
    c, cfg, _ = decoupled
    direct = solve(c, cfg)
    continued = continuation_solve(c, cfg.replace(truncation_ladder=(100.0,)))

    np.testing.assert_array_equal(direct.field.values, continued.field.values)
    np.testing.assert_array_equal(direct.paths.X, continued.paths.X)
    assert continued.diagnostics["continuation"] == [
        {"level": 100.0, "converged": True, "iterations": 2}
    ]


def test_continuation_needs_levels(decoupled):
    c, cfg, _ = decoupled
    with pytest.raises(ConfigurationError, match="solver.truncation_ladder"):
        continuation_solve(c, cfg)


def test_continuation_on_counterexample(counterexample_small):
    coefficients, cfg, _ = counterexample_small
    bundle = continuation_solve(
        coefficients, cfg.replace(truncation_ladder=(2, 5, 10)), init=counterexample_init(cfg, 1.0)
    )
    levels = bundle.diagnostics["continuation"]

    assert [level["level"] for level in levels] == [2, 5, 10]
    assert all(level["converged"] for level in levels)
    # Means stay below sqrt(2), so neither of the upper levels clips anything.
    bound = 3 * (cfg.tol_u + cfg.tol_flow)
    assert levels[2]["field_distance"] < bound
    assert levels[2]["flow_distance"] < bound


def test_continuation_of_linear_drift():
    c = CoefficientSet(
        (1, 1, 1),
        lambda t, x, y, z, mu: x,
        lambda t, x, y, z, mu: 0.0,
        lambda t, x, y, mu: 1.0,
        lambda x, mu: np.sin(x),
    )
    cfg = SolverConfig(
        x0=(0.0,),
        grid=GridSpec(0.5, 20, 8.0, 81),
        particles=1000,
        truncation_ladder=(1, 2, 4, 8),
        max_iters=30,
    )
    levels = continuation_solve(c, cfg).diagnostics["continuation"]
    field_distances = [level["field_distance"] for level in levels[1:]]
    flow_distances = [level["flow_distance"] for level in levels[1:]]

    assert field_distances[0] > field_distances[1] > field_distances[2]
    assert flow_distances[0] > flow_distances[1] >= flow_distances[2]


def test_continuation_divergence_keeps_last_good_level(small_config):
    c = CoefficientSet(
        (1, 1, 1),
        lambda t, x, y, z, mu: 0.0,
        lambda t, x, y, z, mu: 5.0,
        lambda t, x, y, mu: 1.0,
        lambda x, mu: 0.0,
    )
    cfg = small_config.replace(truncation_ladder=(1, 10), gamma_cap=3.0)

    with pytest.raises(ContinuationError) as error:
        continuation_solve(c, cfg)

    assert error.value.level == 10
    assert error.value.bundle.converged
    assert error.value.bundle.field.sup_norm() == pytest.approx(1.0)


def test_multi_start_on_unique_solution(decoupled):
    c, cfg, _ = decoupled
    result = multi_start(c, cfg, [random_init(c, cfg, seed) for seed in range(3)])

    assert result.n_distinct() == 1
    assert result.verdict == "1 distinct solution"
    np.testing.assert_array_equal(result.pairwise_distances, 0.0)


def test_multi_start_finds_counterexample_family(counterexample_small):
    coefficients, cfg, _ = counterexample_small
    inits = [counterexample_init(cfg, A) for A in (-1.0, 0.0, 1.0)]
    result = multi_start(coefficients, cfg, inits, threads=3)

    assert result.verdict == "3 distinct solutions"
    assert result.flow_distances[0, 2] > 1.0
    for bundle, A in zip(result.bundles, (-1.0, 0.0, 1.0)):
        assert bundle.converged
        assert np.max(np.abs(bundle.mean_y()[:, 0] - A * np.cos(cfg.grid.times))) <= 5e-2


def test_multi_start_basin_stability(counterexample_small):
    coefficients, cfg, _ = counterexample_small
    inits = [counterexample_init(cfg, A) for A in (1.0, 1.01)]
    assert multi_start(coefficients, cfg, inits).n_distinct() == 1


def test_multi_start_needs_two_inits(decoupled):
    c, cfg, _ = decoupled
    with pytest.raises(DomainError):
        multi_start(c, cfg, [None])


def test_distinct_solution_count():
    distances = np.array([[0, 0.05, 1], [0.05, 0, 1], [1, 1, 0]])
    result = MultiStartResult([None] * 3, distances, np.zeros((3, 3)), threshold=0.1)
    assert result.n_distinct() == 2
    assert result.verdict == "2 distinct solutions"


@pytest.mark.slow
def test_counterexample_reproduction():
    coefficients, cfg, _ = counterexample(1.0, 10.0)
    bundle = solve(coefficients, cfg, init=counterexample_init(cfg, 1.0))
    times = cfg.grid.times

    assert bundle.converged
    assert np.max(np.abs(bundle.mean_x()[:, 0] - np.sin(times))) <= 5e-2
    assert np.max(np.abs(bundle.mean_y()[:, 0] - np.cos(times))) <= 5e-2


@pytest.mark.slow
def test_counterexample_non_uniqueness():
    coefficients, cfg, _ = counterexample(1.0, 10.0)
    values = (-1.0, 0.0, 1.0)
    result = multi_start(coefficients, cfg, [counterexample_init(cfg, A) for A in values])

    off_diagonal = result.flow_distances[~np.eye(3, dtype=bool)]
    assert np.all(off_diagonal > 0.5)
    for bundle, A in zip(result.bundles, values):
        assert np.max(np.abs(bundle.mean_x()[:, 0] - A * np.sin(cfg.grid.times))) <= 5e-2
        assert np.max(np.abs(bundle.mean_y()[:, 0] - A * np.cos(cfg.grid.times))) <= 5e-2


def test_random_init_is_seeded(decoupled):
    c, cfg, _ = decoupled
    first, second = random_init(c, cfg, 1), random_init(c, cfg, 1)

    np.testing.assert_array_equal(first.phi.values, second.phi.values)
    assert not np.array_equal(first.phi.values, random_init(c, cfg, 2).phi.values)
    assert isinstance(first.phi, DecouplingField)


def test_distinct_solution_count_links_chains():
    # 0 ~ 1 and 1 ~ 2 put all three runs in one component although 0 and 2 are far apart.
    field_distances = np.array([[0, 0.05, 0.2], [0.05, 0, 0.08], [0.2, 0.08, 0]])
    flow_distances = np.array([[0, 0.02, 0.15], [0.02, 0, 0.09], [0.15, 0.09, 0]])
    result = MultiStartResult([None] * 3, field_distances, flow_distances, threshold=0.1)

    assert result.n_distinct() == 1
    assert result.verdict == "1 distinct solution"

    separated = MultiStartResult([None] * 3, field_distances, flow_distances, threshold=0.01)
    assert separated.n_distinct() == 3
