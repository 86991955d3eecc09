import itertools
from pathlib import Path

from scent.services import ScentService
from scent.train import LossWeights

from ._base import ScentCommand


class Command(ScentCommand):
    help = 'Train short runs over a grid of loss weights and report validation losses'

    config_flags = {
        'corpus': ('paths', 'corpus'),
        'seed': ('train', 'seed'),
    }

    def add_arguments(self, parser):
        super().add_arguments(parser)
        self.add_model_arguments(parser)
        parser.add_argument('--w-dec', type=float, nargs='+', help='Decoder loss weights to try')
        parser.add_argument('--w-post', type=float, nargs='+', help='PostNet loss weights to try')
        parser.add_argument('--w-end', type=float, nargs='+', help='Completion loss weights to try')
        parser.add_argument('--epochs', type=int, default=5, help='Epochs per setting (default: 5)')
        parser.add_argument('--seed', type=int, help='Training seed')
        parser.add_argument('--corpus', type=str, help='Corpus directory')
        parser.add_argument('--run-dir', type=str, help='Sweep directory (default: paths.runs/sweep)')

    def run(self, **options):
        config = self.load_config(options)
        loss = config.loss
        grid = [
            LossWeights(w_dec, w_post, w_end)
            for w_dec, w_post, w_end in itertools.product(
                options.get('w_dec') or [loss.w_dec],
                options.get('w_post') or [loss.w_post],
                options.get('w_end') or [loss.w_end],
            )
        ]
        run_dir = Path(options.get('run_dir') or config.runs_dir / 'sweep')

        def progress(weights, summary):
            best = 'n/a' if summary.best_val is None else f"{summary.best_val:.6f}"
            self.stdout.write(f"  w_dec={weights.w_dec:g} w_post={weights.w_post:g} w_end={weights.w_end:g}: {best}")

        self.stdout.write(f"Sweeping {len(grid)} weightings for {options['epochs']} epochs each")
        results = ScentService(config).sweep_weights(grid, run_dir, options['epochs'], progress=progress)

        finished = [(weights, value) for weights, value in results if value is not None]
        if not finished:
            self.stdout.write(self.style.WARNING("No setting produced a finite validation loss"))
            return
        weights, value = min(finished, key=lambda item: item[1])
        self.stdout.write(
            self.style.SUCCESS(
                f"Best: w_dec={weights.w_dec:g} w_post={weights.w_post:g} w_end={weights.w_end:g} ({value:.6f})"
            )
        )
