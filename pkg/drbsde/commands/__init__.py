from drbsde.commands.analysis import analysis_commands
from drbsde.commands.pricing import pricing_commands

__all__ = ['analysis_commands', 'pricing_commands']
