import logging
import sys

import click

from drbsde.config import Config


def create_cli(config_class=Config):
    @click.group()
    @click.option('--log-level', default=config_class.LOG_LEVEL, show_default=True,
                  type=click.Choice(['DEBUG', 'INFO', 'WARNING', 'ERROR'], case_sensitive=False))
    def cli(log_level):
        """Doubly reflected BSDE engine."""
        logging.basicConfig(
            level=log_level.upper(),
            format='%(asctime)s %(levelname)s %(name)s: %(message)s',
            stream=sys.stderr,
        )

    # Register commands
    from drbsde.commands import analysis_commands, pricing_commands
    for command in (*analysis_commands, *pricing_commands):
        cli.add_command(command)

    return cli


def main():
    create_cli()(prog_name='drbsde')
