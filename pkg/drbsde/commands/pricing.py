import click

from drbsde.commands.base import execute, run_options
from drbsde.services.run_service import Command


@click.command()
@run_options
def price(config_path, out, seed):
    """Price the configured game option against the tree oracle; writes price.json."""
    execute(Command.PRICE, config_path, out, seed)


pricing_commands = (price,)
