import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from acoustics.dsp import Waveform, griffin_lim
from acoustics.features import Manifest, read_features, write_features
from acoustics.synth import build_corpus

from .align import (
    downsample_path, dtw, duration_ratio, export_path, interpolate_source, target_to_source,
)
from .checkpoints import load_checkpoint
from .config import RunConfig, apply_ablations, parse_mode
from .exceptions import ConfigError, DataError, NoVoicedFramesError, StepCapExceeded
from .metrics import (
    MetricReport, UtteranceMetrics, alignment_diagnostics, duration_seconds, f0_comparison, mcd_with_path,
    write_matrix_tsv, write_pgm,
)
from .model import ModelConfig, ScentModel, model_inputs
from .train import LossWeights, Trainer, TrainingSummary, feature_stats, prepare_pairs


logger = logging.getLogger('scent.services')

PathLike = Union[str, Path]

TARGET_SYSTEM = '@target'
SOURCE_SYSTEM = '@source'
CONVERSION_INDEX = 'converted.tsv'
CONVERSION_META = 'conversion.json'


@dataclass
class ConvertedItem:
    id: str
    frames: int
    steps: int
    cap_hit: bool


@dataclass
class ConversionSummary:
    out_dir: Path
    items: List[ConvertedItem] = field(default_factory=list)
    ratio: Optional[float] = None

    @property
    def capped(self) -> List[str]:
        return [item.id for item in self.items if item.cap_hit]


@dataclass
class PlotItem:
    id: str
    width: int
    height: int
    entropy: float
    violations: int
    deviation_truth: float
    deviation_dtw: float


@dataclass
class ExperimentResult:
    seed: int
    aggregates: Dict[str, Dict[str, float]]
    diagnostics: Dict[str, Dict[str, float]]
    checks: Dict[str, bool]


class ScentService:
    """
    Service layer tying corpus generation, training, conversion, evaluation
    and plot export to a run configuration.
    """

    def __init__(self, config: RunConfig):
        self.config = config

    # Corpus

    def generate_corpus(self, out_dir: Optional[PathLike] = None, force: bool = False) -> Manifest:
        """
        Write the synthetic corpus.

        Args:
            out_dir: corpus directory (``paths.corpus`` by default)
            force: overwrite an existing corpus

        Returns:
            Manifest: the written manifest
        """
        return build_corpus(self.config.corpus, out_dir or self.config.corpus_dir, self.config.dsp, force=force)

    def load_manifest(self, corpus_dir: Optional[PathLike] = None) -> Manifest:
        manifest = Manifest.read(Path(corpus_dir or self.config.corpus_dir) / 'manifest.tsv')
        n_mels = manifest.dsp.get('n_mels', self.config.dsp.n_mels)
        if n_mels != self.config.dsp.n_mels:
            raise DataError(f"Corpus has {n_mels} mel bands, the configuration expects {self.config.dsp.n_mels}")
        return manifest

    # Training

    def train(self, run_dir: PathLike, corpus_dir: Optional[PathLike] = None, epochs: Optional[int] = None,
              resume: bool = False) -> TrainingSummary:
        """
        Train a model on the corpus training split.

        Normalization statistics come from the training split; the validation
        split, when present, selects ``best.ckpt``.
        """
        config = self.config
        manifest = self.load_manifest(corpus_dir)
        train_pairs = prepare_pairs(manifest, 'train', config.model)
        val_pairs = prepare_pairs(manifest, 'val', config.model) if manifest.select('val') else []
        model = ScentModel(
            config.model, stats=feature_stats(train_pairs), seed=config.train.seed, dtype=config.train.dtype
        )
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / 'run_config.json').write_text(json.dumps(config.to_dict(), sort_keys=True, indent=2) + '\n')
        logger.info(
            "Training started",
            extra={
                'event_type': 'train_started',
                'run_dir': str(run_dir),
                'train_pairs': len(train_pairs),
                'val_pairs': len(val_pairs),
                'parameters': model.params.num_values(),
            }
        )
        trainer = Trainer(model, train_pairs, val_pairs, config.train, config.loss, run_dir)
        return trainer.fit(epochs, resume=resume)

    def load_model(self, checkpoint: PathLike) -> ScentModel:
        return load_checkpoint(checkpoint, self.config.train.dtype).model()

    # Conversion

    def resolve_ratio(self, interp: Optional[Union[str, float]], manifest: Manifest) -> Optional[float]:
        """``auto`` is the training-split duration ratio; numbers pass through."""
        if interp is None:
            return None
        if isinstance(interp, str) and interp.strip().lower() == 'auto':
            return duration_ratio(manifest, 'train')
        try:
            ratio = float(interp)
        except (TypeError, ValueError):
            raise ConfigError(f"--interp expects a positive number or 'auto', got '{interp}'")
        if ratio <= 0:
            raise ConfigError("The interpolation ratio must be positive")
        return ratio

    def convert_split(
        self,
        out_dir: PathLike,
        checkpoint: Optional[PathLike] = None,
        split: str = 'test',
        corpus_dir: Optional[PathLike] = None,
        interp: Optional[Union[str, float]] = None,
        passthrough: bool = False,
        synthesize: bool = False,
        max_steps: Optional[int] = None,
        ids: Optional[Sequence[str]] = None,
    ) -> ConversionSummary:
        """
        Convert every source utterance of a split.

        Writes ``<id>.mel`` (and ``<id>.align`` for model conversions,
        ``<id>.wave`` with ``synthesize``) plus ``converted.tsv``. With
        ``passthrough`` the (optionally interpolated) source features are the
        output, which yields the unmodified and interpolated baselines.

        Raises:
            StepCapExceeded: after all outputs are written, when any utterance
                reached its step cap; ``result`` carries the summary
        """
        config = self.config
        manifest = self.load_manifest(corpus_dir)
        ratio = self.resolve_ratio(interp, manifest)
        model = None
        if not passthrough:
            if checkpoint is None:
                raise ConfigError("A checkpoint is required unless converting in passthrough mode")
            model = self.load_model(checkpoint)

        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        summary = ConversionSummary(out_dir, ratio=ratio)
        sources = sorted(manifest.select(split, 'source'), key=lambda entry: entry.id)
        if ids:
            wanted = set(ids)
            sources = [entry for entry in sources if entry.id in wanted]
        if not sources:
            raise DataError(f"Split '{split}' has no source utterances")

        for entry in sources:
            mel = manifest.load(entry, 'mel').astype(np.float64)
            aux = manifest.load(entry, 'aux').astype(np.float64) if 'aux' in entry.features else None
            if ratio is not None:
                mel = interpolate_source(mel, ratio)
                aux = interpolate_source(aux, ratio) if aux is not None else None
            if model is None:
                frames, steps, cap_hit = mel, 0, False
            else:
                result = model.convert(
                    model_inputs(mel, aux, model.cfg),
                    end_threshold=config.convert['end_threshold'],
                    cap_factor=config.convert['cap_factor'],
                    max_steps=max_steps,
                )
                write_features(out_dir / f"{entry.id}.align", result.alignment)
                frames, steps, cap_hit = result.frames, result.steps, result.cap_hit
            write_features(out_dir / f"{entry.id}.mel", frames)
            if synthesize:
                wave = griffin_lim(frames, config.dsp, config.convert['griffin_lim_iterations'])
                write_features(out_dir / f"{entry.id}.wave", wave.samples)
            summary.items.append(ConvertedItem(entry.id, int(frames.shape[0]), steps, cap_hit))
            logger.debug(
                "Utterance converted",
                extra={'event_type': 'utterance_converted', 'item': entry.id, 'steps': steps, 'cap_hit': cap_hit}
            )

        lines = ['id\tframes\tsteps\tcap_hit']
        lines.extend(f"{item.id}\t{item.frames}\t{item.steps}\t{int(item.cap_hit)}" for item in summary.items)
        (out_dir / CONVERSION_INDEX).write_text('\n'.join(lines) + '\n', encoding='utf-8')
        meta = {
            'split': split,
            'passthrough': passthrough,
            'ratio': ratio,
            'checkpoint': str(checkpoint) if checkpoint else None,
            'M': model.cfg.M if model else config.model.M,
            'r': model.cfg.r if model else config.model.r,
        }
        (out_dir / CONVERSION_META).write_text(json.dumps(meta, sort_keys=True, indent=2) + '\n', encoding='utf-8')

        if summary.capped:
            raise StepCapExceeded(
                f"{len(summary.capped)} utterance(s) reached the step cap: {', '.join(summary.capped)}", summary
            )
        return summary

    # Evaluation

    def _reference(self, manifest: Manifest, entry) -> Tuple[np.ndarray, Waveform]:
        mel = manifest.load(entry, 'mel').astype(np.float64)
        wave = Waveform(manifest.load(entry, 'wave'), self.config.dsp.sample_rate)
        return mel, wave

    def _converted(self, system_dir: str, manifest: Manifest, source, target) -> Tuple[np.ndarray, Waveform]:
        if system_dir == TARGET_SYSTEM:
            return self._reference(manifest, target)
        if system_dir == SOURCE_SYSTEM:
            return self._reference(manifest, source)
        directory = Path(system_dir)
        mel = read_features(directory / f"{source.id}.mel").astype(np.float64)
        wave_path = directory / f"{source.id}.wave"
        if wave_path.exists():
            wave = Waveform(read_features(wave_path), self.config.dsp.sample_rate)
        else:
            wave = griffin_lim(mel, self.config.dsp, self.config.metrics.griffin_lim_iterations)
        return mel, wave

    def evaluate_system(self, name: str, system_dir: str, manifest: Manifest, split: str = 'test') -> MetricReport:
        """
        Metrics of one system's converted split against the target speaker.

        ``@target`` and ``@source`` stand for the corpus's own target and
        source utterances.
        """
        config = self.config
        report = MetricReport(system=name)
        try:
            pairs = manifest.pairs(split)
        except DataError as exc:
            report.errors['manifest'] = str(exc)
            return report

        def score(pair) -> Tuple[str, Any]:
            source, target = pair
            try:
                mel, wave = self._converted(system_dir, manifest, source, target)
                reference_mel, reference_wave = self._reference(manifest, target)
                distortion, path = mcd_with_path(mel, reference_mel, config.dsp, config.metrics)
                item = UtteranceMetrics(
                    mcd=distortion,
                    duration_s=duration_seconds(mel.shape[0], config.dsp),
                    reference_duration_s=target.duration_s,
                    aligned_frames=len(path),
                )
                try:
                    f0 = f0_comparison(wave, reference_wave, config.dsp, path, cfg=config.metrics)
                    item.f0_rmse, item.voiced_frames = f0.rmse, f0.voiced_frames
                except NoVoicedFramesError:
                    logger.warning(
                        "No mutually voiced frames",
                        extra={'event_type': 'no_voiced_frames', 'system': name, 'item': source.id}
                    )
                return source.id, item
            except DataError as exc:
                return source.id, exc

        workers = config.corpus.workers
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                outcomes = list(pool.map(score, pairs))
        else:
            outcomes = [score(pair) for pair in pairs]
        for key, outcome in outcomes:
            if isinstance(outcome, Exception):
                report.errors[key] = str(outcome)
            else:
                report.utterances[key] = outcome
        return report

    def evaluate(self, systems: Dict[str, str], out_dir: PathLike, split: str = 'test',
                 corpus_dir: Optional[PathLike] = None) -> Dict[str, MetricReport]:
        """
        Evaluate several systems and write ``<name>.ini`` per system plus
        ``summary.tsv``.

        Raises:
            DataError: after writing the reports, when any item failed
        """
        manifest = self.load_manifest(corpus_dir)
        out_dir = Path(out_dir)
        reports = {name: self.evaluate_system(name, directory, manifest, split) for name, directory in systems.items()}
        lines = ['system\tmcd\tf0_rmse\tddur\tutterances\terrors']
        for name, report in reports.items():
            report.save(out_dir / f"{name}.ini")
            lines.append(
                f"{name}\t{report.mcd:.6f}\t{report.f0_rmse:.6f}\t{report.ddur:.6f}"
                f"\t{len(report.utterances)}\t{len(report.errors)}"
            )
            logger.info(
                "System evaluated",
                extra={'event_type': 'system_evaluated', 'system': name, **report.aggregate()}
            )
        (out_dir / 'summary.tsv').write_text('\n'.join(lines) + '\n', encoding='utf-8')
        failed = {name: report.errors for name, report in reports.items() if report.errors}
        if failed:
            count = sum(len(errors) for errors in failed.values())
            raise DataError(f"{count} item(s) failed in {', '.join(sorted(failed))}; see the [errors] sections")
        return reports

    # Plots

    def export_plots(self, conversion_dir: PathLike, out_dir: PathLike, split: str = 'test',
                     corpus_dir: Optional[PathLike] = None) -> List[PlotItem]:
        """
        Heatmaps, matrices and path overlays for every ``<id>.align``.

        ``<id>.overlay.tsv`` has one row per decoder step: the attention
        argmax, the DTW path (source vs target mel) and the generator's
        ground-truth path, both mapped to encoder states.
        """
        config = self.config
        conversion_dir = Path(conversion_dir)
        meta_path = conversion_dir / CONVERSION_META
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        M = int(meta.get('M', config.model.M))
        r = int(meta.get('r', config.model.r))
        manifest = self.load_manifest(corpus_dir)
        out_dir = Path(out_dir)
        items = []
        lines = ['id\twidth\theight\tentropy\tviolations\tdeviation_truth\tdeviation_dtw']
        for source, target in manifest.pairs(split):
            align_path = conversion_dir / f"{source.id}.align"
            if not align_path.exists():
                continue
            alignment = read_features(align_path).astype(np.float64)
            steps = alignment.shape[0]
            width, height = write_pgm(alignment, out_dir / f"{source.id}.pgm")
            write_matrix_tsv(alignment, out_dir / f"{source.id}.align.tsv")

            reference = dtw(manifest.load(source, 'mel'), manifest.load(target, 'mel'))
            dtw_points = downsample_path(target_to_source(reference), M, r, steps)
            truth_points = downsample_path(manifest.load(target, 'path').astype(np.int64), M, r, steps)
            overlay = np.stack(
                [np.arange(steps), np.argmax(alignment, axis=1), dtw_points[:, 1], truth_points[:, 1]], axis=1
            )
            export_path(overlay, out_dir / f"{source.id}.overlay.tsv", header='step\tattention\tdtw\ttruth')

            against_truth = alignment_diagnostics(alignment, truth_points, config.metrics.jump_threshold)
            against_dtw = alignment_diagnostics(alignment, dtw_points, config.metrics.jump_threshold)
            item = PlotItem(
                source.id, width, height, against_truth.entropy, against_truth.violations,
                against_truth.deviation, against_dtw.deviation,
            )
            items.append(item)
            lines.append(
                f"{item.id}\t{item.width}\t{item.height}\t{item.entropy:.6f}\t{item.violations}"
                f"\t{item.deviation_truth:.6f}\t{item.deviation_dtw:.6f}"
            )
        if not items:
            raise DataError(f"No alignment files for split '{split}' in {conversion_dir}")
        (out_dir / 'diagnostics.tsv').write_text('\n'.join(lines) + '\n', encoding='utf-8')
        return items

    # Experiments

    def with_model(self, model: ModelConfig, seed: Optional[int] = None,
                   loss: Optional[LossWeights] = None) -> 'ScentService':
        train = self.config.train if seed is None else replace(self.config.train, seed=seed)
        return ScentService(replace(self.config, model=model, train=train, loss=loss or self.config.loss))

    def sweep_weights(self, grid: Iterable[LossWeights], run_dir: PathLike, epochs: int,
                      corpus_dir: Optional[PathLike] = None,
                      progress: Optional[Callable[[LossWeights, TrainingSummary], None]] = None
                      ) -> List[Tuple[LossWeights, Optional[float]]]:
        """Short training runs per loss weighting; returns the best validation loss of each."""
        results = []
        for index, weights in enumerate(grid):
            service = self.with_model(self.config.model, loss=weights.validate())
            summary = service.train(Path(run_dir) / f"sweep-{index:02d}", corpus_dir, epochs=epochs)
            results.append((weights, summary.best_val))
            if progress:
                progress(weights, summary)
        return results

    def _mode_variant(self, mode: str) -> Tuple[ModelConfig, LossWeights]:
        model = ModelConfig(**dict(self.config.model.to_dict(), **parse_mode(mode))).validate()
        if model.output_mode == self.config.model.output_mode:
            return model, self.config.loss
        loss = self.config.loss
        return model, LossWeights.for_mode(model.output_mode, w_post=loss.w_post, w_end=loss.w_end)

    def _train_and_convert(self, name: str, seed: int, root: Path, corpus_dir: Path, epochs: int,
                           interpolated: bool = False) -> TrainingSummary:
        summary = self.train(root / 'runs' / name, corpus_dir, epochs=epochs)
        targets = [(name, None)] + ([(f"i-{name}", 'auto')] if interpolated else [])
        for system, interp in targets:
            try:
                self.convert_split(
                    root / 'converted' / system, root / 'runs' / name / 'latest.ckpt', corpus_dir=corpus_dir,
                    interp=interp,
                )
            except StepCapExceeded as exc:
                logger.warning(str(exc), extra={'event_type': 'step_cap_hit', 'system': system, 'seed': seed})
        return summary

    def run_experiment(self, out_dir: PathLike, seeds: Sequence[int], epochs: int,
                       corpus_dir: Optional[PathLike] = None,
                       progress: Optional[Callable[[str], None]] = None,
                       modes: Sequence[str] = ('mse', 'gmm:2')) -> List[ExperimentResult]:
        """
        Desk-scale reproduction: the proposed model, its ablations, its output
        mode variants and the duration baselines, trained, converted and
        evaluated per seed.

        Checks per seed: alignment deviation from the ground-truth path at
        most 2 states, no monotonicity violations, DDUR ordering
        proposed < i-baseline < baseline, MCD proposed < no-att, MCD
        no-aux > proposed, DDUR no-locc > proposed and DDUR proposed <
        i-no-att. Each mode variant must converge and repeats the alignment,
        DDUR ordering and no-att checks under ``<mode>:<check>``; a mode equal
        to the configured one reuses the proposed run.
        """
        out_dir = Path(out_dir)
        corpus_dir = Path(corpus_dir or self.config.corpus_dir)
        if not (corpus_dir / 'manifest.tsv').exists():
            self.generate_corpus(corpus_dir)
        base = self.config.model.to_dict()
        variants = {
            'proposed': [],
            'no-att': ['no-att'],
            'no-aux': ['no-aux'],
            'no-locc': ['no-locc'],
        }
        mode_variants = {mode: self._mode_variant(mode) for mode in dict.fromkeys(modes)}
        results = []
        for seed in seeds:
            root = out_dir / f"seed-{seed}"
            systems = {}
            summaries = {}
            for name, ablations in variants.items():
                service = self.with_model(ModelConfig(**apply_ablations(base, ablations)).validate(), seed=seed)
                if progress:
                    progress(f"seed {seed}: training {name}")
                summaries[name] = service._train_and_convert(
                    name, seed, root, corpus_dir, epochs, interpolated=name == 'no-att'
                )
                systems[name] = str(root / 'converted' / name)
            systems['i-no-att'] = str(root / 'converted' / 'i-no-att')

            mode_systems = {}
            for mode, (model, loss) in mode_variants.items():
                if model == self.config.model:
                    mode_systems[mode] = 'proposed'
                    continue
                name = f"mode-{mode.replace(':', '')}"
                if progress:
                    progress(f"seed {seed}: training {name}")
                service = self.with_model(model, seed=seed, loss=loss)
                summaries[name] = service._train_and_convert(name, seed, root, corpus_dir, epochs)
                systems[name] = str(root / 'converted' / name)
                mode_systems[mode] = name

            self.convert_split(root / 'converted' / 'baseline', corpus_dir=corpus_dir, passthrough=True)
            self.convert_split(
                root / 'converted' / 'i-baseline', corpus_dir=corpus_dir, passthrough=True, interp='auto'
            )
            systems['baseline'] = str(root / 'converted' / 'baseline')
            systems['i-baseline'] = str(root / 'converted' / 'i-baseline')

            reports = self.evaluate(systems, root / 'reports', corpus_dir=corpus_dir)
            aggregates = {name: report.aggregate() for name, report in reports.items()}
            diagnostics = {}
            for name in ['proposed'] + [system for system in mode_systems.values() if system != 'proposed']:
                plots = self.export_plots(root / 'converted' / name, root / 'plots' / name, corpus_dir=corpus_dir)
                diagnostics[name] = {
                    'deviation': float(np.mean([item.deviation_truth for item in plots])),
                    'violations': float(sum(item.violations for item in plots)),
                }

            def full_model_checks(name):
                return {
                    'alignment_deviation': diagnostics[name]['deviation'] <= 2.0,
                    'monotonic': diagnostics[name]['violations'] == 0,
                    'ddur_ordering': aggregates[name]['ddur'] < aggregates['i-baseline']['ddur']
                    < aggregates['baseline']['ddur'],
                    'mcd_vs_no_att': aggregates[name]['mcd'] < aggregates['no-att']['mcd'],
                }

            checks = full_model_checks('proposed')
            checks.update({
                'aux_helps': aggregates['no-aux']['mcd'] > aggregates['proposed']['mcd'],
                'locc_helps': aggregates['no-locc']['ddur'] > aggregates['proposed']['ddur'],
                'ddur_vs_i_no_att': aggregates['proposed']['ddur'] < aggregates['i-no-att']['ddur'],
            })
            for mode, name in mode_systems.items():
                checks[f"{mode}:converges"] = _converged(summaries[name])
                checks.update({f"{mode}:{check}": passed for check, passed in full_model_checks(name).items()})
            logger.info("Experiment seed finished", extra={'event_type': 'experiment_seed', 'seed': seed, **checks})
            results.append(ExperimentResult(seed, aggregates, diagnostics, checks))
        return results


def _converged(summary: TrainingSummary) -> bool:
    """Finite validation losses whose best improves on the first epoch."""
    history = summary.val_history
    return len(history) >= 2 and bool(np.all(np.isfinite(history))) and min(history[1:]) < history[0]
