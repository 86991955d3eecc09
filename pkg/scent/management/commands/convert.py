from django.core.management.base import CommandError

from scent.exceptions import StepCapExceeded
from scent.services import ScentService

from ._base import ScentCommand


class Command(ScentCommand):
    help = 'Convert the source utterances of a split with a trained model'

    config_flags = {
        'corpus': ('paths', 'corpus'),
    }

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--out', type=str, required=True, help='Output directory')
        parser.add_argument('--checkpoint', type=str, help='Checkpoint to convert with')
        parser.add_argument('--corpus', type=str, help='Corpus directory')
        parser.add_argument(
            '--split',
            type=str,
            default='test',
            choices=['train', 'val', 'test'],
            help='Split to convert (default: test)'
        )
        parser.add_argument(
            '--interp',
            type=str,
            help="Linearly interpolate the source by a ratio first; 'auto' uses the training duration ratio"
        )
        parser.add_argument(
            '--passthrough',
            action='store_true',
            help='Write the (interpolated) source features instead of converting'
        )
        parser.add_argument(
            '--griffin-lim',
            action='store_true',
            help='Also write Griffin-Lim waveforms'
        )
        parser.add_argument('--max-steps', type=int, help='Explicit decoder step cap')
        parser.add_argument('--ids', nargs='+', help='Only these utterance ids')

    def run(self, **options):
        config = self.load_config(options)
        service = ScentService(config)

        try:
            summary = service.convert_split(
                options['out'],
                checkpoint=options.get('checkpoint'),
                split=options['split'],
                interp=options.get('interp'),
                passthrough=options.get('passthrough', False),
                synthesize=options.get('griffin_lim', False),
                max_steps=options.get('max_steps'),
                ids=options.get('ids'),
            )
        except StepCapExceeded as e:
            self.stdout.write(self.style.WARNING("Partial outputs were written for every utterance"))
            raise CommandError(str(e), returncode=e.exit_code)

        if summary.ratio is not None:
            self.stdout.write(f"Interpolated sources by {summary.ratio:.4f}")
        self.stdout.write(self.style.SUCCESS(f"Converted {len(summary.items)} utterances into {summary.out_dir}"))
