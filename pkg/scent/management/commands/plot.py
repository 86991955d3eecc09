from scent.services import ScentService

from ._base import ScentCommand


class Command(ScentCommand):
    help = 'Export attention heatmaps, matrices and DTW overlays of a conversion run'

    config_flags = {
        'corpus': ('paths', 'corpus'),
    }

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--converted', type=str, required=True, help='Directory written by convert')
        parser.add_argument('--out', type=str, required=True, help='Output directory')
        parser.add_argument('--corpus', type=str, help='Corpus directory')
        parser.add_argument(
            '--split',
            type=str,
            default='test',
            choices=['train', 'val', 'test'],
            help='Split the conversion was run on (default: test)'
        )

    def run(self, **options):
        service = ScentService(self.load_config(options))
        items = service.export_plots(options['converted'], options['out'], split=options['split'])

        for item in items:
            line = f"  {item.id}: {item.width}x{item.height}, deviation {item.deviation_truth:.2f}"
            if item.violations:
                self.stdout.write(self.style.WARNING(f"{line}, {item.violations} monotonicity violation(s)"))
            else:
                self.stdout.write(line)
        self.stdout.write(self.style.SUCCESS(f"Exported {len(items)} alignments to {options['out']}"))
