from collections import Counter
from pathlib import Path

from scent.services import ScentService

from ._base import ScentCommand


class Command(ScentCommand):
    help = (
        'Train, convert and evaluate the proposed model, its ablations, output mode variants '
        'and the duration baselines'
    )

    config_flags = {
        'corpus': ('paths', 'corpus'),
        'batch': ('train', 'batch'),
    }

    def add_arguments(self, parser):
        super().add_arguments(parser)
        self.add_model_arguments(parser)
        parser.add_argument('--seeds', type=int, nargs='+', default=[0, 1, 2], help='Training seeds (default: 0 1 2)')
        parser.add_argument('--epochs', type=int, default=30, help='Epochs per model (default: 30)')
        parser.add_argument('--modes', nargs='+', default=['mse', 'gmm:2'],
                            help='Output modes trained alongside the proposed model (default: mse gmm:2)')
        parser.add_argument('--batch', type=int, help='Batch size')
        parser.add_argument('--corpus', type=str, help='Corpus directory (generated if missing)')
        parser.add_argument('--out', type=str, help='Experiment directory (default: paths.runs/experiment)')

    def run(self, **options):
        config = self.load_config(options)
        out_dir = Path(options.get('out') or config.runs_dir / 'experiment')
        service = ScentService(config)

        results = service.run_experiment(
            out_dir, options['seeds'], options['epochs'], progress=lambda message: self.stdout.write(message),
            modes=options['modes'],
        )

        votes = Counter()
        for result in results:
            self.stdout.write(f"seed {result.seed}:")
            for name, aggregate in sorted(result.aggregates.items()):
                self.stdout.write(
                    f"  {name:<12} MCD {aggregate['mcd']:.3f}  F0 RMSE {aggregate['f0_rmse']:.2f}"
                    f"  DDUR {aggregate['ddur']:.3f}"
                )
            for check, passed in result.checks.items():
                votes[check] += int(passed)

        majority = len(results) // 2 + 1
        for check in results[0].checks:
            message = f"{check}: {votes[check]}/{len(results)} seeds"
            style = self.style.SUCCESS if votes[check] >= majority else self.style.ERROR
            self.stdout.write(style(message))
