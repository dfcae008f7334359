import click

from drbsde.commands.base import execute, run_options
from drbsde.services.run_service import Command


@click.command()
@run_options
def solve(config_path, out, seed):
    """Solve the configured problem; writes summary.json and series.csv."""
    execute(Command.SOLVE, config_path, out, seed)


@click.command()
@run_options
def converge(config_path, out, seed):
    """Penalization convergence study; writes convergence.csv and summary.json."""
    execute(Command.CONVERGE, config_path, out, seed)


@click.command()
@run_options
def compare(config_path, out, seed):
    """Solve 'problem' and 'compare' on shared noise; writes comparison.json."""
    execute(Command.COMPARE, config_path, out, seed)


analysis_commands = (solve, converge, compare)
