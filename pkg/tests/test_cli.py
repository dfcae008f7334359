import json
import os

import numpy as np
import pytest
from click.testing import CliRunner

from drbsde import create_cli
from drbsde.config import Config, parse_run_config
from drbsde.services import run_service
from drbsde.services.results_service import SERIES_COLUMNS, ResultsStore, to_plain

CONSTANT_ONE = {'problem': {'terminal': {'kind': 'constant', 'value': 1.0}}, 'grid': {'T': 1.0, 'N': 20}}

REGRESSION = {
    'problem': {'terminal': {'kind': 'identity'}, 'generator': 'linear', 'params': {'rate': 0.05}},
    'grid': {'T': 1.0, 'N': 10},
    'engine': {'backend': 'regression', 'solver': 'bsde'},
    'simulation': {'n_paths': 3000, 'seed': 5},
}

GAME_PUT = {
    'problem': {
        'terminal': {'kind': 'put', 'strike': 100},
        'lower': {'kind': 'put', 'strike': 100},
        'upper': {'kind': 'put', 'strike': 100, 'premium': 2},
    },
    'market': {'s0': 100, 'r': 0.05, 'sigma': 0.2},
    'grid': {'T': 1.0, 'N': 100},
}


def invoke(*args):
    return CliRunner().invoke(create_cli(), list(args))


def read(path):
    with open(path, 'rb') as handle:
        return handle.read()


# =============================================================================
# SUCCESSFUL RUNS
# =============================================================================

def test_solve_constant_terminal(write_config, tmp_path):
    result = invoke('solve', '--config', write_config(CONSTANT_ONE))
    assert result.exit_code == 0, result.output
    out = tmp_path / 'out'
    summary = json.loads((out / 'summary.json').read_text())
    assert summary['y0'] == 1.0
    assert summary['command'] == 'solve'
    assert (out / 'series.csv').exists()


def test_solve_is_byte_identical_across_runs(write_config, tmp_path):
    path = write_config(CONSTANT_ONE)
    first, second = tmp_path / 'first', tmp_path / 'second'
    assert invoke('solve', '--config', path, '--out', str(first)).exit_code == 0
    assert invoke('solve', '--config', path, '--out', str(second)).exit_code == 0
    for name in ('summary.json', 'series.csv'):
        assert read(first / name) == read(second / name)


def test_regression_output_does_not_depend_on_workers(write_config, tmp_path, monkeypatch):
    path = write_config(REGRESSION)
    runs = {}
    for workers in (1, 4):
        monkeypatch.setattr(Config, 'WORKERS', workers)
        out = tmp_path / f'workers{workers}'
        assert invoke('solve', '--config', path, '--out', str(out)).exit_code == 0
        runs[workers] = out
    for name in ('summary.json', 'series.csv'):
        assert read(runs[1] / name) == read(runs[4] / name)


def test_seed_override(write_config, tmp_path):
    path = write_config(REGRESSION)
    assert invoke('solve', '--config', path, '--out', str(tmp_path / 'a'), '--seed', '1').exit_code == 0
    assert invoke('solve', '--config', path, '--out', str(tmp_path / 'b'), '--seed', '2').exit_code == 0
    a = json.loads((tmp_path / 'a' / 'summary.json').read_text())
    b = json.loads((tmp_path / 'b' / 'summary.json').read_text())
    assert (a['seed'], b['seed']) == (1, 2)
    assert a['y0'] != b['y0']


def test_results_read_back_exactly(tmp_path):
    raw = dict(CONSTANT_ONE, problem={
        'terminal': {'kind': 'identity'}, 'generator': 'linear', 'params': {'rate': 0.3},
        'lower': {'kind': 'constant', 'value': -5.0},
    })
    raw['output'] = {'directory': str(tmp_path)}
    config = parse_run_config(raw)
    job = run_service.run(run_service.Command.SOLVE, config)
    assert job.status == run_service.RunStatus.COMPLETED.value

    store = ResultsStore(str(tmp_path))
    assert store.load_json('summary.json') == to_plain(job.record)

    grid = run_service.build_grid(config.grid.T, config.grid.N)
    problem = run_service.build_problem(config.problem, grid)
    sol = run_service.solve_configured(config, problem, run_service.backend_factory(config)(grid), grid,
                                       run_service.build_weights(config, problem, grid))
    frame = store.load_table('series.csv')
    assert tuple(frame.columns) == SERIES_COLUMNS
    for column, values in sol.series().items():
        np.testing.assert_array_equal(frame[column].to_numpy(), values)


def test_converge(write_config, tmp_path):
    config = {
        'problem': {
            'terminal': {'kind': 'constant', 'value': 0.0},
            'generator': 'affine', 'params': {'intercept': 1.0, 'y_coef': -0.05},
            'upper': {'kind': 'constant', 'value': 0.5},
        },
        'grid': {'T': 1.0, 'N': 50},
        'engine': {'schedule': [16, 32, 64]},
    }
    result = invoke('converge', '--config', write_config(config))
    assert result.exit_code == 0, result.output
    store = ResultsStore(str(tmp_path / 'out'))
    frame = store.load_table('convergence.csv')
    assert frame['n'].tolist() == [16, 32, 64]
    distances = frame['distance'].to_numpy()
    assert np.all(np.diff(distances) <= 1e-12)
    summary = store.load_json('summary.json')
    assert summary['distance_nonincreasing']
    assert summary['grid_steps'] == 150


def test_compare(write_config, tmp_path):
    floor = {'kind': 'constant', 'value': 0.2}
    config = {
        'problem': {'terminal': {'kind': 'constant', 'value': 0.5}, 'lower': floor},
        'compare': {'terminal': {'kind': 'constant', 'value': 1.0}, 'lower': floor},
        'grid': {'T': 1.0, 'N': 20},
    }
    assert invoke('compare', '--config', write_config(config)).exit_code == 0
    record = ResultsStore(str(tmp_path / 'out')).load_json('comparison.json')
    assert record['ordered']
    assert record['y0_problem'] == 0.5 and record['y0_compare'] == 1.0


def test_price_on_the_lattice(write_config, tmp_path):
    assert invoke('price', '--config', write_config(GAME_PUT)).exit_code == 0
    record = ResultsStore(str(tmp_path / 'out')).load_json('price.json')
    assert record['engine'] == 'clamped'
    assert record['relative_gap'] <= 1e-10


def test_price_with_the_penalized_engine(write_config, tmp_path):
    config = dict(GAME_PUT, engine={'solver': 'penalized', 'penalty': 16})
    assert invoke('price', '--config', write_config(config)).exit_code == 0
    record = ResultsStore(str(tmp_path / 'out')).load_json('price.json')
    assert record['meta']['penalty'] == 16
    assert record['relative_gap'] > 0.0


# =============================================================================
# FAILURES
# =============================================================================

def test_malformed_json_exits_with_config_code(tmp_path):
    path = tmp_path / 'bad.json'
    path.write_text('{\n  "problem": \n}\n')
    out = tmp_path / 'errors'
    result = invoke('solve', '--config', str(path), '--out', str(out))
    assert result.exit_code == 2
    assert 'line' in result.output
    error = json.loads((out / 'error.json').read_text())
    assert error['error'] == 'ConfigError'
    assert error['command'] == 'solve'


def test_unknown_generator_exits_with_config_code(write_config):
    config = {'problem': {'terminal': {'kind': 'constant'}, 'generator': 'cubic'}}
    result = invoke('solve', '--config', write_config(config))
    assert result.exit_code == 2
    assert 'problem.generator' in result.output


def test_price_needs_a_market(write_config):
    config = {key: value for key, value in GAME_PUT.items() if key != 'market'}
    assert invoke('price', '--config', write_config(config)).exit_code == 2


@pytest.mark.parametrize('extra, field', [
    ({'generator': 'linear', 'params': {'rate': 0.05}}, 'problem.generator'),
    ({'params': {'rate': 0.05}}, 'problem.params'),
    ({'strict_separation': True}, 'problem.strict_separation'),
])
def test_price_rejects_a_problem_driver(write_config, extra, field):
    config = dict(GAME_PUT, problem={**GAME_PUT['problem'], **extra})
    result = invoke('price', '--config', write_config(config))
    assert result.exit_code == 2
    assert field in result.output


def test_step_size_failure_exits_with_numeric_code(write_config, tmp_path):
    config = {
        'problem': {'terminal': {'kind': 'constant', 'value': 1.0}, 'generator': 'linear',
                    'params': {'rate': 200.0}},
        'grid': {'T': 1.0, 'N': 10},
    }
    result = invoke('solve', '--config', write_config(config))
    assert result.exit_code == 3
    error = json.loads((tmp_path / 'out' / 'error.json').read_text())
    assert error['error'] == 'StepSizeTooLargeError'
    assert not os.path.exists(tmp_path / 'out' / 'summary.json')


@pytest.mark.parametrize('args', [['solve'], ['solve', '--config', 'x.json', '--seed', '-1']])
def test_usage_errors(args):
    assert invoke(*args).exit_code == 2
