"""
Synthetic paired-speaker corpus.

The same symbol sequence is rendered by two voices. The target timeline is a
monotone piecewise-linear warp of the source timeline, so every pair carries
its exact alignment (target frame -> source frame), F0 tracks, durations and a
speaker-independent auxiliary channel derived from the symbol labels.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import signal

from scent.exceptions import ConfigError, DataError

from .dsp import MelConfig, Waveform, mel_spectrogram, upsample_by_repetition
from .features import Manifest, ManifestEntry, SPLITS, write_features


logger = logging.getLogger('acoustics.synth')

UNVOICED_SYMBOLS = 2
FORMANT_BANDWIDTHS = np.array([80.0, 120.0, 160.0])
FORMANT_GAINS = np.array([1.0, 0.7, 0.4])
BOUNDARY_WEIGHT = 0.2
PEAK = 0.9
FEATURE_KINDS = ('mel', 'aux', 'f0', 'wave', 'labels')


def symbol_formants(alphabet_size: int) -> np.ndarray:
    """(alphabet_size, 3) formant centres in Hz."""
    index = np.arange(alphabet_size)
    first = 250.0 + 50.0 * (index % 8)
    second = 900.0 + 110.0 * ((index * 5) % 16)
    third = 2500.0 + 60.0 * ((index * 3) % 8)
    return np.stack([first, second, third], axis=1)


def symbol_pitch_factors(alphabet_size: int) -> np.ndarray:
    factors = 1.0 + 0.04 * ((np.arange(alphabet_size) % 5) - 2)
    factors[alphabet_size - UNVOICED_SYMBOLS:] = 0.0
    return factors


@dataclass(frozen=True)
class VoiceSpec:
    f0_base: float = 120.0
    formant_scale: float = 1.0
    tilt: float = 0.6
    rate: float = 1.0
    noise_level: float = 1e-3


DEFAULT_SOURCE_VOICE = VoiceSpec()
DEFAULT_TARGET_VOICE = VoiceSpec(f0_base=210.0, formant_scale=1.15, tilt=0.9, rate=1.25)


@dataclass
class WarpSpec:
    """
    Global duration ratio plus a monotone piecewise-linear local warp.

    ``knots`` are (source position, target position) pairs on [0, 1], starting
    at (0, 0) and ending at (1, 1).
    """

    ratio: float = 1.0
    knots: List[Tuple[float, float]] = field(default_factory=lambda: [(0.0, 0.0), (1.0, 1.0)])
    jitter_seed: int = 0

    def validate(self) -> 'WarpSpec':
        if not 0.5 <= self.ratio <= 2.0:
            raise DataError(f"Warp ratio {self.ratio} is outside [0.5, 2]")
        knots = np.asarray(self.knots, dtype=np.float64)
        if knots.ndim != 2 or knots.shape[0] < 2 or knots.shape[1] != 2:
            raise DataError("Warp needs at least two (source, target) knots")
        if not np.allclose(knots[0], 0.0) or not np.allclose(knots[-1], 1.0):
            raise DataError("Warp knots must start at (0, 0) and end at (1, 1)")
        if np.any(np.diff(knots[:, 0]) <= 0) or np.any(np.diff(knots[:, 1]) <= 0):
            raise DataError("Degenerate warp: knots are not strictly increasing")
        return self

    def __call__(self, position: np.ndarray) -> np.ndarray:
        knots = np.asarray(self.knots, dtype=np.float64)
        return np.interp(position, knots[:, 0], knots[:, 1])

    @classmethod
    def random(cls, jitter_seed: int, ratio: float, jitter: float = 0.08, n_knots: int = 3) -> 'WarpSpec':
        """Evenly spaced source knots with target segment lengths jittered by up to ``jitter``."""
        rng = np.random.default_rng(jitter_seed)
        widths = 1.0 + jitter * rng.uniform(-1.0, 1.0, size=n_knots + 1)
        target = np.concatenate([[0.0], np.cumsum(widths) / widths.sum()])
        source = np.linspace(0.0, 1.0, n_knots + 2)
        target[-1] = 1.0
        knots = [(float(s), float(t)) for s, t in zip(source, target)]
        return cls(ratio=ratio, knots=knots, jitter_seed=jitter_seed).validate()

    def to_dict(self) -> Dict[str, Any]:
        return {'ratio': self.ratio, 'knots': [list(k) for k in self.knots], 'jitter_seed': self.jitter_seed}


@dataclass
class ContentSpec:
    symbols: List[int]
    durations: List[int]

    @property
    def n_frames(self) -> int:
        return int(sum(self.durations))


@dataclass
class CorpusSpec:
    n_train: int = 200
    n_val: int = 20
    n_test: int = 20
    seed: int = 0
    min_frames: int = 60
    max_frames: int = 240
    alphabet_size: int = 16
    min_symbols: int = 5
    max_symbols: int = 20
    min_symbol_frames: int = 4
    max_symbol_frames: int = 20
    warp_ratio: float = 0.8
    warp_jitter: float = 0.08
    aux_upsample: int = 4
    noise_level: float = 1e-3
    workers: int = 1

    def validate(self) -> 'CorpusSpec':
        if min(self.n_train, self.n_val, self.n_test) < 0 or self.n_train < 1:
            raise ConfigError("Corpus needs at least one training pair and nonnegative split sizes")
        if not 1 <= self.min_symbols <= self.max_symbols:
            raise ConfigError("Symbol count bounds are inconsistent")
        if not 1 <= self.min_symbol_frames <= self.max_symbol_frames:
            raise ConfigError("Symbol duration bounds are inconsistent")
        if self.min_frames > self.max_symbols * self.max_symbol_frames \
                or self.max_frames < self.min_symbols * self.min_symbol_frames \
                or self.min_frames > self.max_frames:
            raise ConfigError("Frame bounds cannot be met by the symbol bounds")
        if not UNVOICED_SYMBOLS < self.alphabet_size:
            raise ConfigError(f"alphabet_size must exceed {UNVOICED_SYMBOLS}")
        if not 0 <= self.warp_jitter < 1:
            raise ConfigError("warp_jitter must lie in [0, 1)")
        if self.aux_upsample < 1 or self.workers < 1:
            raise ConfigError("aux_upsample and workers must be positive")
        return self

    def split_sizes(self) -> Dict[str, int]:
        return {'train': self.n_train, 'val': self.n_val, 'test': self.n_test}

    def voices(self) -> Tuple[VoiceSpec, VoiceSpec]:
        source = VoiceSpec(
            f0_base=DEFAULT_SOURCE_VOICE.f0_base,
            formant_scale=DEFAULT_SOURCE_VOICE.formant_scale,
            tilt=DEFAULT_SOURCE_VOICE.tilt,
            rate=DEFAULT_SOURCE_VOICE.rate,
            noise_level=self.noise_level,
        )
        target = VoiceSpec(
            f0_base=DEFAULT_TARGET_VOICE.f0_base,
            formant_scale=DEFAULT_TARGET_VOICE.formant_scale,
            tilt=DEFAULT_TARGET_VOICE.tilt,
            rate=source.rate / self.warp_ratio,
            noise_level=self.noise_level,
        )
        return source, target


@dataclass
class SyntheticUtterance:
    waveform: Waveform
    mel: np.ndarray
    aux: np.ndarray
    f0: np.ndarray
    labels: np.ndarray
    boundaries: np.ndarray
    voice: VoiceSpec

    @property
    def n_frames(self) -> int:
        return int(self.mel.shape[0])


@dataclass
class SyntheticPair:
    source: SyntheticUtterance
    target: SyntheticUtterance
    path: np.ndarray
    content: ContentSpec
    warp: WarpSpec


def sample_content(rng: np.random.Generator, spec: CorpusSpec, max_tries: int = 10000) -> ContentSpec:
    """Rejection-sample a symbol sequence whose total frame count lies in the corpus bounds."""
    for _ in range(max_tries):
        count = int(rng.integers(spec.min_symbols, spec.max_symbols + 1))
        durations = rng.integers(spec.min_symbol_frames, spec.max_symbol_frames + 1, size=count)
        if spec.min_frames <= durations.sum() <= spec.max_frames:
            symbols = rng.integers(0, spec.alphabet_size, size=count)
            return ContentSpec([int(s) for s in symbols], [int(d) for d in durations])
    raise DataError("Could not sample content within the frame bounds")


def warp_boundaries(source_boundaries: np.ndarray, warp: WarpSpec) -> np.ndarray:
    """Target symbol boundaries: the warped source boundaries, at least one frame per symbol."""
    total_source = int(source_boundaries[-1])
    total_target = int(round(warp.ratio * total_source))
    count = len(source_boundaries) - 1
    if total_target < count:
        raise DataError("Degenerate warp: fewer target frames than symbols")
    target = np.rint(total_target * warp(source_boundaries / total_source)).astype(np.int64)
    target[0], target[-1] = 0, total_target
    for k in range(1, count + 1):
        target[k] = max(target[k], target[k - 1] + 1)
    target[-1] = total_target
    for k in range(count - 1, 0, -1):
        target[k] = min(target[k], target[k + 1] - 1)
    return target


def ground_truth_path(source_boundaries: np.ndarray, target_boundaries: np.ndarray) -> np.ndarray:
    """For every target frame, the source frame at the same relative position inside its symbol."""
    path = np.zeros(int(target_boundaries[-1]), dtype=np.int64)
    for k in range(len(target_boundaries) - 1):
        t0, t1 = int(target_boundaries[k]), int(target_boundaries[k + 1])
        s0, s1 = int(source_boundaries[k]), int(source_boundaries[k + 1])
        frac = (np.arange(t0, t1) - t0 + 0.5) / (t1 - t0)
        path[t0:t1] = np.minimum(s0 + np.floor(frac * (s1 - s0)).astype(np.int64), s1 - 1)
    return path


def frame_labels(symbols: Sequence[int], boundaries: np.ndarray) -> np.ndarray:
    return np.repeat(np.asarray(symbols, dtype=np.int64), np.diff(boundaries))


def auxiliary_channel(labels: np.ndarray, alphabet_size: int, upsample: int) -> np.ndarray:
    """
    Smoothed one-hot symbol track at a coarse rate, repeated up to the frame rate.

    Coarse frames next to a symbol change give ``BOUNDARY_WEIGHT`` to the
    neighbouring symbol. Rows sum to one.
    """
    n_frames = labels.size
    centres = np.minimum(np.arange(0, n_frames, upsample) + upsample // 2, n_frames - 1)
    coarse_labels = labels[centres]
    eye = np.eye(alphabet_size)
    coarse = eye[coarse_labels].copy()
    for c in range(coarse_labels.size):
        for neighbour in (c - 1, c + 1):
            if 0 <= neighbour < coarse_labels.size and coarse_labels[neighbour] != coarse_labels[c]:
                coarse[c] -= BOUNDARY_WEIGHT * eye[coarse_labels[c]]
                coarse[c] += BOUNDARY_WEIGHT * eye[coarse_labels[neighbour]]
    return upsample_by_repetition(coarse, upsample, n_frames)


def _envelope(frequencies: np.ndarray, formants: np.ndarray, tilt: float) -> np.ndarray:
    """Spectral envelope sampled at ``frequencies`` (frames, harmonics)."""
    gain = np.full(frequencies.shape, 0.05)
    for j in range(formants.shape[1]):
        offset = (frequencies - formants[:, j:j + 1]) / FORMANT_BANDWIDTHS[j]
        gain += FORMANT_GAINS[j] * np.exp(-0.5 * offset * offset)
    return gain * np.power(np.maximum(frequencies, 1.0) / 200.0, -tilt)


def render(
    content: ContentSpec,
    boundaries: np.ndarray,
    voice: VoiceSpec,
    cfg: MelConfig,
    excitation_seed: Sequence[int],
    floor_seed: Sequence[int],
    alphabet_size: int,
) -> Tuple[Waveform, np.ndarray]:
    """
    Harmonic-plus-noise rendering of a symbol sequence on a given timeline.

    Returns:
        (waveform, ground-truth F0 per frame with 0 for unvoiced frames)
    """
    n_frames = int(boundaries[-1])
    hop = cfg.hop_length
    sr = cfg.sample_rate
    nyquist_guard = 0.975 * sr / 2.0
    labels = frame_labels(content.symbols, boundaries)
    pitch = symbol_pitch_factors(alphabet_size)[labels]
    declination = 1.05 - 0.1 * np.arange(n_frames) / max(n_frames - 1, 1)
    f0 = voice.f0_base * pitch * declination
    formants = symbol_formants(alphabet_size)[labels] * voice.formant_scale

    n_samples = (n_frames - 1) * hop + 1
    frame_of_sample = np.minimum((np.arange(n_samples) + hop // 2) // hop, n_frames - 1)
    voiced_frames = f0 > 0
    sample_f0 = f0[frame_of_sample]
    phase = 2.0 * np.pi * np.cumsum(sample_f0) / sr

    voiced = np.zeros(n_samples)
    if np.any(voiced_frames):
        max_harmonic = int(nyquist_guard // f0[voiced_frames].min())
        harmonics = np.arange(1, max_harmonic + 1)
        frequencies = f0[:, None] * harmonics[None, :]
        amplitude = _envelope(frequencies, formants, voice.tilt)
        amplitude[frequencies >= nyquist_guard] = 0.0
        amplitude[~voiced_frames] = 0.0
        amplitude /= np.maximum(amplitude.sum(axis=1, keepdims=True), 1e-12)
        for index, harmonic in enumerate(harmonics):
            voiced += amplitude[frame_of_sample, index] * np.sin(harmonic * phase)

    excitation = np.random.default_rng(list(excitation_seed)).standard_normal(n_samples)
    fricative = signal.lfilter([1.0, -0.9], [1.0], excitation) * 0.15
    fricative *= ~voiced_frames[frame_of_sample]

    samples = voiced + fricative
    peak = float(np.max(np.abs(samples)))
    if peak > 0:
        samples = PEAK * samples / peak
    if voice.noise_level > 0:
        floor = np.random.default_rng(list(floor_seed)).standard_normal(n_samples)
        samples = samples + voice.noise_level * floor
    samples = np.clip(samples, -1.0, 1.0)
    return Waveform(samples, sr), np.where(voiced_frames, f0, 0.0)


def _utterance(content, boundaries, voice, cfg, seed, role_index, alphabet_size, upsample) -> SyntheticUtterance:
    waveform, f0 = render(
        content, boundaries, voice, cfg,
        excitation_seed=[seed, 0], floor_seed=[seed, 1 + role_index],
        alphabet_size=alphabet_size,
    )
    labels = frame_labels(content.symbols, boundaries)
    return SyntheticUtterance(
        waveform=waveform,
        mel=mel_spectrogram(waveform, cfg),
        aux=auxiliary_channel(labels, alphabet_size, upsample),
        f0=f0,
        labels=labels,
        boundaries=boundaries,
        voice=voice,
    )


def generate_pair(
    seed: int,
    content: ContentSpec,
    source_voice: VoiceSpec,
    target_voice: VoiceSpec,
    warp: WarpSpec,
    cfg: Optional[MelConfig] = None,
    alphabet_size: int = 16,
    aux_upsample: int = 4,
) -> SyntheticPair:
    """
    Render ``content`` with both voices.

    The source timeline is the content durations divided by the source
    speaking rate; the target timeline is its warp.
    """
    cfg = cfg or MelConfig()
    warp.validate()
    if len(content.symbols) != len(content.durations) or not content.symbols:
        raise DataError("Content needs one duration per symbol")
    if max(content.symbols) >= alphabet_size:
        raise DataError("Content uses symbols outside the alphabet")
    scaled = np.maximum(np.rint(np.asarray(content.durations) / source_voice.rate), 1).astype(np.int64)
    source_boundaries = np.concatenate([[0], np.cumsum(scaled)])
    target_boundaries = warp_boundaries(source_boundaries, warp)
    source = _utterance(content, source_boundaries, source_voice, cfg, seed, 0, alphabet_size, aux_upsample)
    target = _utterance(content, target_boundaries, target_voice, cfg, seed, 1, alphabet_size, aux_upsample)
    path = ground_truth_path(source_boundaries, target_boundaries)
    return SyntheticPair(source, target, path, content, warp)


def _item_seed(spec: CorpusSpec, split: str, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([spec.seed, SPLITS.index(split), index])


def _generate_item(spec: CorpusSpec, cfg: MelConfig, split: str, index: int) -> SyntheticPair:
    sequence = _item_seed(spec, split, index)
    content_seed, warp_seed, render_seed = (int(s) for s in sequence.generate_state(3))
    content = sample_content(np.random.default_rng(content_seed), spec)
    source_voice, target_voice = spec.voices()
    warp = WarpSpec.random(warp_seed, ratio=source_voice.rate / target_voice.rate, jitter=spec.warp_jitter)
    return generate_pair(
        render_seed, content, source_voice, target_voice, warp, cfg,
        alphabet_size=spec.alphabet_size, aux_upsample=spec.aux_upsample,
    )


def _write_utterance(root: Path, prefix: str, utterance: SyntheticUtterance) -> Dict[str, str]:
    arrays = {
        'mel': utterance.mel,
        'aux': utterance.aux,
        'f0': utterance.f0,
        'wave': utterance.waveform.samples,
        'labels': utterance.labels,
    }
    paths = {}
    for kind in FEATURE_KINDS:
        relative = f"{prefix}.{kind}"
        write_features(root / relative, arrays[kind])
        paths[kind] = relative
    return paths


def build_corpus(
    spec: CorpusSpec,
    out_dir,
    cfg: Optional[MelConfig] = None,
    force: bool = False,
) -> Manifest:
    """
    Generate every split and write feature files plus ``manifest.tsv``.

    Args:
        spec: split sizes, seed and content bounds
        out_dir: corpus directory
        cfg: feature extraction settings
        force: overwrite an existing corpus

    Returns:
        Manifest: the written manifest

    Raises:
        DataError: the directory already holds a corpus and ``force`` is off
    """
    spec.validate()
    cfg = (cfg or MelConfig()).validate()
    root = Path(out_dir)
    manifest_path = root / 'manifest.tsv'
    if manifest_path.exists() and not force:
        raise DataError(f"{manifest_path} already exists; pass force to overwrite")

    jobs = [(split, index) for split, size in spec.split_sizes().items() for index in range(size)]
    item_ids = [f"{split}-{index:04d}" for split, index in jobs]
    if len(set(item_ids)) != len(item_ids):
        raise DataError("Corpus item paths collide")

    def work(job):
        return _generate_item(spec, cfg, *job)

    if spec.workers > 1:
        with ThreadPoolExecutor(max_workers=spec.workers) as pool:
            pairs = list(pool.map(work, jobs))
    else:
        pairs = [work(job) for job in jobs]

    manifest = Manifest(root=root, dsp=cfg.to_dict())
    for (split, _), item_id, pair in zip(jobs, item_ids, pairs):
        prefix = f"{split}/{item_id}"
        path_file = f"{prefix}/path"
        write_features(root / path_file, pair.path)
        content = {'symbols': pair.content.symbols, 'durations': pair.content.durations}
        for role, utterance, tag in (('source', pair.source, 'src'), ('target', pair.target, 'tgt')):
            features = _write_utterance(root, f"{prefix}/{tag}", utterance)
            features['path'] = path_file
            manifest.add(ManifestEntry(
                id=item_id,
                split=split,
                role=role,
                duration_s=utterance.n_frames * cfg.hop_length / cfg.sample_rate,
                frames=utterance.n_frames,
                features=features,
                ground_truth={
                    'content': content,
                    'boundaries': [int(b) for b in utterance.boundaries],
                    'voice': asdict(utterance.voice),
                    'warp': pair.warp.to_dict(),
                    'voiced_frames': int(np.count_nonzero(utterance.f0)),
                },
            ))
        logger.debug(
            "Corpus item written",
            extra={'event_type': 'corpus_item_written', 'item': item_id, 'split': split}
        )

    manifest.save(manifest_path)
    logger.info(
        "Corpus written",
        extra={'event_type': 'corpus_written', 'root': str(root), 'items': len(jobs)}
    )
    return manifest
