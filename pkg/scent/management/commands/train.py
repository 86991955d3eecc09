from pathlib import Path

from scent.services import ScentService

from ._base import ScentCommand


def default_run_name(config) -> str:
    model = config.model
    name = 'mse' if model.output_mode == 'mse' else f"gmm{model.mixtures}"
    return '-'.join([name] + list(config.ablations))


class Command(ScentCommand):
    help = 'Train a conversion model on the corpus training split'

    config_flags = {
        'corpus': ('paths', 'corpus'),
        'seed': ('train', 'seed'),
        'epochs': ('train', 'epochs'),
        'batch': ('train', 'batch'),
        'lr': ('train', 'lr'),
    }

    def add_arguments(self, parser):
        super().add_arguments(parser)
        self.add_model_arguments(parser)
        parser.add_argument('--corpus', type=str, help='Corpus directory')
        parser.add_argument(
            '--run-dir',
            type=str,
            help='Output directory for checkpoints and logs (default: paths.runs/<mode>[-<ablations>])'
        )
        parser.add_argument('--epochs', type=int, help='Total number of epochs')
        parser.add_argument('--seed', type=int, help='Training seed')
        parser.add_argument('--batch', type=int, help='Batch size')
        parser.add_argument('--lr', type=float, help='Initial learning rate')
        parser.add_argument(
            '--resume',
            action='store_true',
            help='Continue from latest.ckpt in the run directory'
        )

    def run(self, **options):
        config = self.load_config(options)
        run_dir = Path(options.get('run_dir') or config.runs_dir / default_run_name(config))
        service = ScentService(config)

        self.stdout.write(
            f"Training {default_run_name(config)} for {config.train.epochs} epochs into {run_dir}"
        )
        summary = service.train(run_dir, resume=options.get('resume', False))

        if summary.skipped_steps:
            self.stdout.write(self.style.WARNING(f"{summary.skipped_steps} step(s) skipped on non-finite values"))
        best = 'n/a' if summary.best_val is None else f"{summary.best_val:.6f}"
        self.stdout.write(
            self.style.SUCCESS(f"Finished epoch {summary.epochs} after {summary.steps} steps; best validation loss {best}")
        )
