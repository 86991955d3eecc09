from django.core.management.base import BaseCommand, CommandError

from scent.config import ABLATIONS, add_config_arguments, config_from_options
from scent.exceptions import ScentError


class ScentCommand(BaseCommand):
    """
    Management command over a run configuration.

    Subclasses implement ``run``; library errors become ``CommandError`` with
    the error's exit code.
    """

    # option name -> (config section, key) overridden by that option
    config_flags = {}

    def add_arguments(self, parser):
        add_config_arguments(parser)

    def add_model_arguments(self, parser):
        parser.add_argument(
            '--mode',
            type=str,
            help="Output mode: 'mse' or 'gmm:<mixtures>'"
        )
        parser.add_argument(
            '--ablate',
            action='append',
            choices=sorted(ABLATIONS),
            help='Ablation to apply (repeatable)'
        )

    def load_config(self, options):
        return config_from_options(options, self.config_flags)

    def handle(self, *args, **options):
        try:
            return self.run(**options)
        except ScentError as e:
            raise CommandError(str(e), returncode=e.exit_code)

    def run(self, **options):
        raise NotImplementedError
