import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drbsde.errors import InvalidArgumentError
from drbsde.models import SolutionBundle, TimeGrid
from drbsde.services.core_service import accumulate_weights, beta_norms, build_grid, weights_for_problem
from drbsde.utils.generators import CATALOG, affine, build_generator, linear, probe_lipschitz, zero

from conftest import flat_problem, paths_layout


def bundle(grid, y, z=None):
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    z = np.zeros(y.shape + (1,)) if z is None else np.asarray(z, dtype=float)
    zeros = np.zeros_like(y)
    return SolutionBundle(y, z, zeros, zeros.copy(), paths_layout(grid, y.shape[1]))


# =============================================================================
# GRID
# =============================================================================

def test_build_grid_single_step():
    grid = build_grid(1.0, 1)
    np.testing.assert_array_equal(grid.nodes, [0.0, 1.0])


def test_build_grid_quarters():
    grid = build_grid(1.0, 4)
    np.testing.assert_allclose(grid.nodes, [0.0, 0.25, 0.5, 0.75, 1.0])
    assert grid.n_steps == 4


def test_build_grid_steps_sum_to_horizon():
    grid = build_grid(0.5, 5)
    np.testing.assert_allclose(grid.steps, 0.1, rtol=1e-12)
    assert abs(grid.steps.sum() - 0.5) <= 1e-12
    assert grid.nodes[-1] == 0.5


@pytest.mark.parametrize('T, N', [(0.0, 10), (-1.0, 10), (1.0, 0), (1.0, -3), (float('nan'), 4)])
def test_build_grid_rejects_bad_arguments(T, N):
    with pytest.raises(InvalidArgumentError):
        build_grid(T, N)


def test_time_grid_rejects_unordered_nodes():
    with pytest.raises(InvalidArgumentError):
        TimeGrid([0.0, 0.5, 0.5, 1.0])
    with pytest.raises(InvalidArgumentError):
        TimeGrid([0.1, 0.5, 1.0])


def test_refine_keeps_original_nodes():
    grid = build_grid(1.0, 4)
    fine = grid.refine(3)
    assert fine.n_steps == 12
    np.testing.assert_allclose(fine.nodes[::3], grid.nodes, rtol=0, atol=1e-15)
    assert fine.is_uniform


# =============================================================================
# WEIGHTS
# =============================================================================

def test_weights_floor_only():
    w = accumulate_weights(0.0, 0.0, 0.01, 1.0, build_grid(1.0, 2))
    np.testing.assert_allclose(w.a_sq, 0.01)
    np.testing.assert_allclose(w.A, [0.0, 0.005, 0.01], rtol=1e-12)


def test_weights_mu_plus_gamma_squared():
    w = accumulate_weights(1.0, 1.0, 0.01, 1.0, build_grid(1.0, 1))
    np.testing.assert_allclose(w.a_sq, 2.0)
    np.testing.assert_allclose(w.A, [0.0, 2.0])


def test_weights_time_dependent_rate():
    grid = build_grid(1.0, 2)
    w = accumulate_weights(grid.nodes, 0.0, 1e-6, 1.0, grid)
    np.testing.assert_allclose(w.a_sq, [1e-6, 0.5, 1.0])
    np.testing.assert_allclose(w.A, [0.0, 5e-7, 5e-7 + 0.25], rtol=1e-12)


def test_weights_increments_reconstruct_rates():
    grid = build_grid(2.0, 40)
    rng = np.random.default_rng(3)
    w = accumulate_weights(rng.uniform(0, 2, 41), rng.uniform(0, 1, 41), 1e-4, 6.0, grid)
    np.testing.assert_allclose(np.diff(w.A), w.a_sq[:-1] * grid.steps, rtol=0, atol=1e-12)
    assert np.all(np.diff(w.A) >= 0)


def test_weights_state_dependent_rates_keep_shape():
    grid = build_grid(1.0, 4)
    mu = np.tile(np.linspace(0, 1, 3), (5, 1))
    w = accumulate_weights(mu, 0.0, 1e-4, 2.0, grid)
    assert w.A.shape == (5, 3)
    np.testing.assert_array_equal(w.mu_by_level(), np.ones(5))


@pytest.mark.parametrize('mu, gamma, eps, beta', [
    (-1.0, 0.0, 0.01, 1.0),
    (0.0, -0.5, 0.01, 1.0),
    (0.0, 0.0, 0.0, 1.0),
    (0.0, 0.0, 0.01, -1.0),
])
def test_weights_reject_out_of_domain(mu, gamma, eps, beta):
    with pytest.raises(InvalidArgumentError):
        accumulate_weights(mu, gamma, eps, beta, build_grid(1.0, 4))


def test_weights_for_problem_use_declared_envelope():
    grid = build_grid(1.0, 10)
    problem = flat_problem(grid, generator=affine(1.0, -0.3, [0.4, 0.0]))
    w = weights_for_problem(problem, grid)
    np.testing.assert_allclose(w.mu, 0.3)
    np.testing.assert_allclose(w.a_sq, 0.3 + 0.16)

    overridden = weights_for_problem(problem, grid, mu=2.0, gamma=0.0)
    np.testing.assert_allclose(overridden.a_sq, 2.0)


# =============================================================================
# NORMS
# =============================================================================

def test_norms_of_zero_solution_vanish():
    grid = build_grid(1.0, 8)
    report = beta_norms(bundle(grid, np.zeros((9, 3))), accumulate_weights(1.0, 1.0, 1e-4, 6.0, grid), grid)
    assert report.sup_norm == report.ay_norm == report.z_norm == 0.0


def test_norms_of_constant_solution_without_growth():
    grid = build_grid(1.0, 4)
    w = accumulate_weights(1.0, 0.0, 1e-6, 0.0, grid)
    report = beta_norms(bundle(grid, np.ones(5)), w, grid)
    assert report.sup_norm == pytest.approx(1.0, abs=1e-12)
    assert report.ay_norm == pytest.approx(1.0, abs=1e-12)
    assert report.z_norm == 0.0


def test_norms_with_growth():
    grid = build_grid(1.0, 4)
    w = accumulate_weights(1.0, 0.0, 1e-6, 1.0, grid)
    report = beta_norms(bundle(grid, np.ones(5)), w, grid)
    expected = 0.25 * sum(np.exp(t) for t in grid.nodes[:-1])
    assert report.ay_norm == pytest.approx(expected, rel=1e-12)
    assert report.sup_norm == pytest.approx(np.e, rel=1e-12)


def test_norms_count_z_components():
    grid = build_grid(1.0, 2)
    z = np.zeros((3, 1, 2))
    z[:-1, 0, :] = [3.0, 4.0]
    w = accumulate_weights(0.0, 0.0, 1.0, 0.0, grid)
    report = beta_norms(bundle(grid, np.zeros(3), z), w, grid)
    assert report.z_norm == pytest.approx(25.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(min_value=-10.0, max_value=10.0, allow_nan=False))
def test_norms_are_quadratically_homogeneous(c):
    grid = build_grid(1.0, 10)
    rng = np.random.default_rng(0)
    y = rng.normal(size=(11, 5))
    z = rng.normal(size=(11, 5, 1))
    w = accumulate_weights(0.7, 0.3, 1e-4, 6.0, grid)
    base = beta_norms(bundle(grid, y, z), w, grid)
    scaled = beta_norms(bundle(grid, c * y, c * z), w, grid)
    for name in ('sup_norm', 'ay_norm', 'z_norm'):
        assert getattr(scaled, name) == pytest.approx(c ** 2 * getattr(base, name), rel=1e-12, abs=1e-300)


def test_norms_increase_with_beta():
    grid = build_grid(1.0, 10)
    y = np.random.default_rng(1).normal(size=(11, 4))
    values = [
        beta_norms(bundle(grid, y), accumulate_weights(0.5, 0.0, 1e-4, beta, grid), grid).combined
        for beta in (0.0, 1.0, 6.0, 12.0)
    ]
    assert all(b >= a for a, b in zip(values, values[1:]))


def test_norms_reject_mismatched_grid():
    grid = build_grid(1.0, 4)
    w = accumulate_weights(0.0, 0.0, 1.0, 0.0, build_grid(1.0, 8))
    with pytest.raises(InvalidArgumentError):
        beta_norms(bundle(grid, np.ones(5)), w, grid)


# =============================================================================
# GENERATORS
# =============================================================================

@pytest.mark.parametrize('generator, d', [
    (zero(), 1),
    (linear(0.05), 1),
    (linear(-2.0), 1),
    (affine(0.3, -1.5, [0.3, -0.2]), 2),
    (build_generator('discounting', {'rates': 0.05}, build_grid(1.0, 20).nodes), 1),
    (build_generator('physical_discounting', {'rates': 0.05, 'premia': 0.3}, build_grid(1.0, 20).nodes), 1),
])
def test_catalog_envelopes_hold(generator, d):
    assert probe_lipschitz(generator, build_grid(1.0, 20).nodes, d=d) <= 1e-9


def test_probe_detects_understated_envelope():
    understated = linear(2.0)
    understated = type(understated)(name='bad', fn=understated.fn, mu=lambda t: 1.0, gamma=lambda t: 0.0)
    assert probe_lipschitz(understated, build_grid(1.0, 5).nodes) > 0.0


def test_discounting_is_step_consistent():
    grid = build_grid(1.0, 10)
    f = build_generator('discounting', {'rates': 0.05}, grid.nodes)
    rho = -float(f(grid.nodes[3], np.ones(1), np.zeros((1, 1)))[0])
    assert 1.0 / (1.0 + rho * 0.1) == pytest.approx(np.exp(-0.05 * 0.1), rel=1e-14)


def test_build_generator_errors():
    with pytest.raises(InvalidArgumentError):
        build_generator('quadratic')
    with pytest.raises(InvalidArgumentError):
        build_generator('linear', {'slope': 1.0})
    with pytest.raises(InvalidArgumentError):
        build_generator('discounting', {'rates': 0.05})
    assert set(CATALOG) >= {'zero', 'linear', 'affine', 'discounting', 'physical_discounting'}


def test_shifted_generator_keeps_envelope():
    f = linear(0.5).shifted(-0.1)
    assert f(0.0, np.array([2.0]), np.zeros((1, 1)))[0] == pytest.approx(-1.1)
    assert f.mu(0.0) == 0.5
