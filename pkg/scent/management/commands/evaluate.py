from django.core.management.base import CommandError

from scent.exceptions import DataError
from scent.services import ScentService

from ._base import ScentCommand


class Command(ScentCommand):
    help = 'Compute MCD, F0 RMSE and DDUR of converted systems against the target speaker'

    config_flags = {
        'corpus': ('paths', 'corpus'),
    }

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument(
            '--system',
            action='append',
            required=True,
            metavar='NAME=DIR',
            help="Converted output to evaluate (repeatable); DIR may be @target or @source"
        )
        parser.add_argument('--out', type=str, required=True, help='Report directory')
        parser.add_argument('--corpus', type=str, help='Corpus directory')
        parser.add_argument(
            '--split',
            type=str,
            default='test',
            choices=['train', 'val', 'test'],
            help='Split to evaluate (default: test)'
        )

    def run(self, **options):
        systems = {}
        for text in options['system']:
            name, separator, directory = text.partition('=')
            if not separator or not name or not directory:
                raise CommandError(f"Expected NAME=DIR, got '{text}'", returncode=2)
            systems[name] = directory

        service = ScentService(self.load_config(options))
        try:
            reports = service.evaluate(systems, options['out'], split=options['split'])
        except DataError as e:
            self.stdout.write(self.style.ERROR(str(e)))
            raise CommandError(str(e), returncode=e.exit_code)

        self.stdout.write(f"{'system':<16}{'MCD [dB]':>10}{'F0 RMSE [Hz]':>14}{'DDUR [s]':>10}")
        for name, report in reports.items():
            self.stdout.write(f"{name:<16}{report.mcd:>10.3f}{report.f0_rmse:>14.2f}{report.ddur:>10.3f}")
        self.stdout.write(self.style.SUCCESS(f"Reports written to {options['out']}"))
