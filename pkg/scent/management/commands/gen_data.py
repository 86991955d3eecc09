from scent.services import ScentService

from ._base import ScentCommand


class Command(ScentCommand):
    help = 'Generate the synthetic paired-speaker corpus'

    config_flags = {
        'out': ('paths', 'corpus'),
        'seed': ('corpus', 'seed'),
        'n_train': ('corpus', 'n_train'),
        'n_val': ('corpus', 'n_val'),
        'n_test': ('corpus', 'n_test'),
        'workers': ('corpus', 'workers'),
    }

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument(
            '--out',
            type=str,
            help='Corpus directory (default: paths.corpus)'
        )
        parser.add_argument(
            '--seed',
            type=int,
            help='Corpus seed'
        )
        parser.add_argument('--n-train', type=int, help='Training pairs')
        parser.add_argument('--n-val', type=int, help='Validation pairs')
        parser.add_argument('--n-test', type=int, help='Test pairs')
        parser.add_argument(
            '--workers',
            type=int,
            help='Generation threads'
        )
        parser.add_argument(
            '--force',
            action='store_true',
            help='Overwrite an existing corpus'
        )

    def run(self, **options):
        config = self.load_config(options)
        service = ScentService(config)

        self.stdout.write(f"Generating corpus in {config.corpus_dir} (seed {config.corpus.seed})")
        manifest = service.generate_corpus(force=options.get('force', False))

        for split in ('train', 'val', 'test'):
            self.stdout.write(f"  {split}: {len(manifest.select(split, 'source'))} pairs")
        self.stdout.write(
            self.style.SUCCESS(f"Wrote {len(manifest)} manifest entries to {config.corpus_dir / 'manifest.tsv'}")
        )
