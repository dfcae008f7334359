import numpy as np
import pytest
from hypothesis import given, strategies as st

from drbsde.errors import InconsistentBarriersError, InvalidArgumentError
from drbsde.models import MarketSpec
from drbsde.services.core_service import build_grid, weights_for_problem
from drbsde.services.expectation_service import build_backend, build_lattice
from drbsde.services.game_option_service import (
    GameSpec,
    dynkin_tree_oracle,
    evaluate_payoff,
    exercise_regions,
    holder_policy_value,
    holder_policy_values,
    price_game_option,
)
from drbsde.services.results_service import dumps
from drbsde.services.solver_service import solve_clamped
from drbsde.utils.payoffs import Payoff

from conftest import PUT_MARKET, crr_american_put, lattice_backend

PUT = Payoff(kind='put', strike=100.0)
TRAJECTORY = np.linspace(80.0, 120.0, 11)


# =============================================================================
# PAYOFF
# =============================================================================

@pytest.mark.parametrize('tau, nu, expected', [
    (10, 10, 0.0),   # maturity: xi(120)
    (2, 5, 12.0),    # holder first: L(88)
    (3, 1, 18.0),    # issuer first: U(84) = 16 + 2
    (4, 4, 4.0),     # together: the holder's payoff
    (10, 3, 10.0),   # issuer before maturity: U(92)
])
def test_payoff_branches(game_put, tau, nu, expected):
    assert evaluate_payoff(game_put, tau, nu, TRAJECTORY) == pytest.approx(expected)


@given(st.integers(min_value=0, max_value=10), st.integers(min_value=0, max_value=10))
def test_payoff_matches_the_stopping_rule(tau, nu):
    spec = GameSpec.cancellable_put(100.0, 100.0, 2.0)
    value = evaluate_payoff(spec, tau, nu, TRAJECTORY)
    put = np.maximum(100.0 - TRAJECTORY, 0.0)
    if min(tau, nu) == 10:
        assert value == put[10]
    elif nu < tau:
        assert value == pytest.approx(put[nu] + 2.0)
    else:
        assert value == put[tau]


def test_payoff_rejects_bad_indices(game_put):
    with pytest.raises(InvalidArgumentError):
        evaluate_payoff(game_put, 11, 0, TRAJECTORY)
    with pytest.raises(InvalidArgumentError):
        evaluate_payoff(game_put, 0, -1, TRAJECTORY)
    with pytest.raises(InvalidArgumentError):
        evaluate_payoff(game_put, 0, 0, TRAJECTORY[:1])


def test_negative_premium_is_rejected():
    with pytest.raises(InvalidArgumentError):
        GameSpec.cancellable_call(100.0, 100.0, -1.0)


# =============================================================================
# TREE ORACLE
# =============================================================================

def test_oracle_without_issuer_is_the_american_put():
    lattice = build_lattice(build_grid(1.0, 100), PUT_MARKET)
    oracle = dynkin_tree_oracle(GameSpec(PUT_MARKET, terminal=PUT, lower=PUT), lattice)
    assert oracle.value == pytest.approx(crr_american_put(100.0, 100.0, 0.05, 0.2, 1.0, 100), rel=1e-12)


def test_oracle_without_barriers_is_the_european_value():
    lattice = build_lattice(build_grid(1.0, 100), PUT_MARKET)
    oracle = dynkin_tree_oracle(GameSpec(PUT_MARKET, terminal=PUT), lattice)
    payoff = np.maximum(100.0 - lattice.level(100), 0.0)
    expected = np.exp(-0.05) * np.sum(lattice.reach_probabilities()[-1] * payoff)
    assert oracle.value == pytest.approx(expected, rel=1e-12)


def test_oracle_with_coinciding_barriers_pays_at_once():
    put = Payoff(kind='put', strike=110.0)
    lattice = build_lattice(build_grid(1.0, 50), PUT_MARKET)
    oracle = dynkin_tree_oracle(GameSpec(PUT_MARKET, terminal=put, lower=put, upper=put), lattice)
    assert oracle.value == pytest.approx(10.0)


def test_oracle_rejects_crossed_payoffs():
    lattice = build_lattice(build_grid(1.0, 10), PUT_MARKET)
    with pytest.raises(InconsistentBarriersError):
        dynkin_tree_oracle(GameSpec(PUT_MARKET, terminal=PUT, lower=PUT.with_premium(1.0), upper=PUT), lattice)
    with pytest.raises(InvalidArgumentError):
        dynkin_tree_oracle(GameSpec(PUT_MARKET, terminal=PUT), build_lattice(build_grid(1.0, 10)))


def test_oracle_is_monotone_in_the_premium():
    lattice = build_lattice(build_grid(1.0, 100), PUT_MARKET)
    values = [
        dynkin_tree_oracle(GameSpec.cancellable_put(100.0, 100.0, premium), lattice).value
        for premium in (0.0, 1.0, 2.0, 5.0, 20.0)
    ]
    assert all(b >= a for a, b in zip(values, values[1:]))
    assert values[0] == pytest.approx(0.0, abs=1e-12)
    assert values[-1] == pytest.approx(crr_american_put(100.0, 100.0, 0.05, 0.2, 1.0, 100), rel=1e-12)


def test_delayed_exercise_never_beats_the_game_value(game_put):
    lattice = build_lattice(build_grid(1.0, 100), game_put.market)
    oracle = dynkin_tree_oracle(game_put, lattice)
    mask = lattice.mask()
    np.testing.assert_allclose(holder_policy_values(game_put, lattice, oracle, 0)[mask],
                               oracle.values[mask], rtol=0, atol=1e-12)
    rng = np.random.default_rng(0)
    levels = rng.integers(0, 101, size=100)
    nodes = (levels, rng.integers(0, levels + 1))
    for delay in (1, 2, 3):
        delayed = holder_policy_values(game_put, lattice, oracle, delay)
        assert np.all(delayed[nodes] <= oracle.values[nodes] + 1e-12)
        assert holder_policy_value(game_put, lattice, oracle, delay) <= oracle.value + 1e-12
    with pytest.raises(InvalidArgumentError):
        holder_policy_value(game_put, lattice, oracle, -1)


# =============================================================================
# PRICING ENGINES
# =============================================================================

ORACLE_CASES = [
    GameSpec.cancellable_put(100.0, 100.0, 2.0),
    GameSpec.cancellable_put(100.0, 90.0, 1.0, r=0.03, sigma=0.3),
    GameSpec.cancellable_put(100.0, 110.0, 5.0, r=0.08, sigma=0.25),
    GameSpec.cancellable_put(80.0, 100.0, 0.5, r=0.02, sigma=0.4),
    GameSpec.cancellable_put(120.0, 100.0, 3.0, r=0.05, sigma=0.15),
    GameSpec.cancellable_call(100.0, 100.0, 2.0),
    GameSpec.cancellable_call(100.0, 90.0, 4.0, r=0.03, sigma=0.3),
    GameSpec.cancellable_call(100.0, 110.0, 1.0, r=0.08, sigma=0.25),
    GameSpec.cancellable_call(120.0, 100.0, 6.0, r=0.01, sigma=0.35),
    GameSpec(MarketSpec(s0=100.0, r=0.05, sigma=0.2), terminal=PUT, lower=PUT),
]


@pytest.mark.parametrize('spec', ORACLE_CASES)
def test_clamped_engine_matches_the_oracle(spec):
    grid, backend = lattice_backend(T=1.0, N=100, market=spec.market)
    price = price_game_option(spec, 'clamped', grid, backend)
    assert abs(price.value - price.oracle_value) <= 1e-10
    assert price.oracle_value == pytest.approx(dynkin_tree_oracle(spec, backend.lattice).value, rel=1e-14)


def test_picard_engine_matches_the_clamped_engine(game_put):
    grid, backend = lattice_backend(T=1.0, N=100, market=game_put.market)
    picard = price_game_option(game_put, 'picard', grid, backend)
    clamped = price_game_option(game_put, 'clamped', grid, backend)
    assert picard.meta['picard']['converged']
    assert picard.value == pytest.approx(clamped.value, rel=1e-4)


def test_penalized_engine_approaches_the_oracle(game_put):
    grid, backend = lattice_backend(T=1.0, N=300, market=game_put.market)
    coarse, fine = (price_game_option(game_put, 'penalized', grid, backend, penalty=n) for n in (16, 256))
    assert fine.relative_gap < coarse.relative_gap


PENALIZED_CASES = [
    GameSpec(MarketSpec(s0=100.0, r=0.05, sigma=0.2), terminal=PUT, lower=PUT),
    GameSpec.cancellable_put(100.0, 100.0, 10.0),
    GameSpec.cancellable_put(60.0, 100.0, 1.0),
    GameSpec.cancellable_call(100.0, 100.0, 15.0),
]


@pytest.mark.parametrize('spec', PENALIZED_CASES)
def test_penalized_engine_within_one_percent(spec):
    grid, backend = lattice_backend(T=1.0, N=300, market=spec.market)
    price = price_game_option(spec, 'penalized', grid, backend, penalty=256)
    assert price.relative_gap <= 0.01


def test_penalized_gap_at_the_money_kink_grows_with_the_grid(game_put):
    gaps = []
    for N in (300, 1000):
        grid, backend = lattice_backend(T=1.0, N=N, market=game_put.market)
        gaps.append(price_game_option(game_put, 'penalized', grid, backend, penalty=256).relative_gap)
    assert 0.01 < gaps[0] < gaps[1]


def test_upper_penalty_approaches_from_above(game_put):
    grid, backend = lattice_backend(T=1.0, N=300, market=game_put.market)
    coarse = price_game_option(game_put, 'penalized', grid, backend, penalty=16, lower_mode='clamp')
    fine = price_game_option(game_put, 'penalized', grid, backend, penalty=256, lower_mode='clamp')
    assert fine.meta['penalty'] == 256
    assert fine.oracle_value - 1e-10 <= fine.value <= coarse.value + 1e-12


def test_price_sits_between_the_single_barrier_values(game_put):
    grid, backend = lattice_backend(T=1.0, N=100, market=game_put.market)
    problem = game_put.to_problem(grid)
    w = weights_for_problem(problem, grid)
    issuer_only = solve_clamped(problem.without_lower(), backend, grid, w).y0
    holder_only = solve_clamped(problem.without_upper(), backend, grid, w).y0
    price = price_game_option(game_put, 'clamped', grid, backend, w).value
    assert issuer_only <= price + 1e-12
    assert price <= holder_only + 1e-12


def test_exercise_regions(game_put):
    grid, backend = lattice_backend(T=1.0, N=100, market=game_put.market)
    price = price_game_option(game_put, 'clamped', grid, backend)
    regions = price.regions
    assert regions.holder.any() and regions.issuer.any()
    assert not np.any(regions.holder & regions.issuer)
    fractions = regions.fractions()
    np.testing.assert_allclose(np.add(np.add(fractions['holder'], fractions['issuer']),
                                      fractions['continuation']), 1.0)
    oracle = dynkin_tree_oracle(game_put, backend.lattice)
    mask = backend.layout.mask
    assert np.all(regions.holder[:-1][oracle.holder_stop[:-1] & mask[:-1]])
    assert np.all(regions.issuer[:-1][oracle.issuer_stop[:-1] & mask[:-1]])
    assert exercise_regions(price.solution, game_put.to_problem(grid)).holder.sum() == regions.holder.sum()


def test_price_record_is_serializable(game_put):
    grid, backend = lattice_backend(T=1.0, N=20, market=game_put.market)
    record = price_game_option(game_put, 'clamped', grid, backend).to_dict()
    assert set(record) == {'engine', 'value', 'oracle_value', 'relative_gap', 'regions', 'meta'}
    assert len(record['regions']['holder']) == 21
    assert '"engine": "clamped"' in dumps(record)


def test_pricing_argument_checks(game_put):
    grid, backend = lattice_backend(T=1.0, N=20, market=game_put.market)
    with pytest.raises(InvalidArgumentError):
        price_game_option(game_put, 'binomial', grid, backend)
    with pytest.raises(InvalidArgumentError):
        price_game_option(game_put, 'clamped', grid, backend, measure='physical')
    brownian_grid, brownian = lattice_backend(T=1.0, N=20)
    with pytest.raises(InvalidArgumentError):
        price_game_option(game_put, 'clamped', brownian_grid, brownian)


# =============================================================================
# REGRESSION PRICING
# =============================================================================

@pytest.mark.slow
def test_regression_prices_the_american_put():
    spec = GameSpec(PUT_MARKET, terminal=PUT, lower=PUT)
    grid = build_grid(1.0, 20)
    backend = build_backend('regression', grid, PUT_MARKET, n_paths=100_000, seed=1)
    price = price_game_option(spec, 'clamped', grid, backend)
    assert price.relative_gap <= 0.02
    assert price.meta['measure'] == 'risk_neutral'


def test_physical_measure_without_premium_matches_risk_neutral():
    spec = GameSpec(PUT_MARKET, terminal=PUT, lower=PUT)
    grid = build_grid(1.0, 20)
    backend = build_backend('regression', grid, PUT_MARKET, n_paths=20_000, seed=2, risk_neutral=False)
    physical = price_game_option(spec, 'clamped', grid, backend, measure='physical')
    neutral = price_game_option(spec, 'clamped', grid, backend)
    assert physical.value == pytest.approx(neutral.value, rel=1e-3)


@pytest.mark.slow
def test_physical_measure_with_premium():
    market = MarketSpec(s0=100.0, r=0.05, theta=0.3, sigma=0.2)
    spec = GameSpec(market, terminal=PUT, lower=PUT)
    grid = build_grid(1.0, 20)
    backend = build_backend('regression', grid, market, n_paths=100_000, seed=3, risk_neutral=False)
    price = price_game_option(spec, 'clamped', grid, backend, measure='physical')
    assert price.relative_gap <= 0.05
