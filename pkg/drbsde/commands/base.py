"""
Shared pieces of the commands: the common options and the execute step that
maps failures to exit codes.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import functools
import logging
from typing import Optional

import click

from drbsde.config import load_run_config
from drbsde.errors import ConfigError, DRBSDEError
from drbsde.services.results_service import ResultsStore, dumps
from drbsde.services.run_service import Command, RunJob, run

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def run_options(func):
    """--config, --out and --seed, shared by every command."""
    @click.option('--seed', type=click.IntRange(0, 2 ** 64 - 1), default=None,
                  help='Override simulation.seed.')
    @click.option('--out', 'out', type=click.Path(file_okay=False), default=None,
                  help='Override output.directory.')
    @click.option('--config', 'config_path', type=click.Path(dir_okay=False), required=True,
                  help='JSON run configuration.')
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        return func(*args, **kwargs)
    return wrapper


def execute(command: Command, config_path: str, out: Optional[str], seed: Optional[int]) -> RunJob:
    """Load the config, run the command and exit with the mapped status on failure."""
    ctx = click.get_current_context()
    try:
        config = load_run_config(config_path).with_overrides(out=out, seed=seed)
    except ConfigError as exc:
        _fail(command, exc, out)
        ctx.exit(EXIT_CONFIG)
    try:
        job = run(command, config)
    except ConfigError as exc:
        _report(command, exc)
        ctx.exit(EXIT_CONFIG)
    except DRBSDEError as exc:
        _report(command, exc)
        ctx.exit(EXIT_NUMERIC)
    for path in job.outputs:
        click.echo(path)
    return job


def _record(command: Command, exc: DRBSDEError) -> dict:
    return {'error': type(exc).__name__, 'message': str(exc), 'command': command.value}


def _report(command: Command, exc: DRBSDEError) -> None:
    click.echo(dumps(_record(command, exc)), err=True, nl=False)


def _fail(command: Command, exc: DRBSDEError, out: Optional[str]) -> None:
    """Errors before a run exists; error.json goes to --out when one was given."""
    _report(command, exc)
    if out is not None:
        ResultsStore(out).save_error(_record(command, exc))
