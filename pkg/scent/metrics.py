"""
Objective evaluation: mel-cepstral distortion, voiced F0 RMSE, duration
differences, attention diagnostics and report/heatmap export.
"""

import configparser
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple, Union

import numpy as np
from scipy import fft

from acoustics.dsp import F0Config, MelConfig, Waveform, extract_f0, mel_spectrogram

from .align import DtwPath, dtw
from .exceptions import ConfigError, DataError, NoVoicedFramesError


logger = logging.getLogger('scent.metrics')

MCD_SCALE = 10.0 / math.log(10.0)

Signal = Union[np.ndarray, Waveform]


@dataclass(frozen=True)
class MetricConfig:
    mcd_coeffs: int = 25
    jump_threshold: int = 3
    griffin_lim_iterations: int = 32

    def validate(self) -> 'MetricConfig':
        if self.mcd_coeffs < 2:
            raise ConfigError("mcd_coeffs must be at least 2 (c0 is excluded)")
        if self.jump_threshold < 1:
            raise ConfigError("jump_threshold must be positive")
        if self.griffin_lim_iterations < 0:
            raise ConfigError("griffin_lim_iterations must be nonnegative")
        return self


def mel_cepstra(mel: np.ndarray, n_coeffs: int) -> np.ndarray:
    """Orthonormal DCT-II of log-mel frames along the mel axis, first ``n_coeffs`` kept."""
    mel = np.asarray(mel, dtype=np.float64)
    if mel.ndim != 2:
        raise DataError(f"Expected (frames, n_mels) log-mel features, got shape {mel.shape}")
    if n_coeffs > mel.shape[1]:
        raise ConfigError(f"Cannot keep {n_coeffs} cepstra from {mel.shape[1]} mel bands")
    return fft.dct(mel, type=2, norm='ortho', axis=1)[:, :n_coeffs]


def _as_mel(signal: Signal, mel_cfg: MelConfig) -> np.ndarray:
    if isinstance(signal, Waveform):
        return mel_spectrogram(signal, mel_cfg)
    return np.asarray(signal, dtype=np.float64)


def _distortion_cepstra(signal: Signal, mel_cfg: MelConfig, cfg: MetricConfig) -> np.ndarray:
    mel = _as_mel(signal, mel_cfg)
    return mel_cepstra(mel, min(cfg.mcd_coeffs, mel.shape[1]))[:, 1:]


def mcd_with_path(converted: Signal, reference: Signal, mel_cfg: Optional[MelConfig] = None,
                  cfg: Optional[MetricConfig] = None) -> Tuple[float, DtwPath]:
    """
    Mel-cepstral distortion after DTW alignment, with the alignment used.

    ``(10 / ln 10) * sqrt(2 * sum_i (c_i - c'_i)^2)`` averaged over aligned
    pairs, coefficients 1 to n-1.
    """
    mel_cfg = mel_cfg or MelConfig()
    cfg = cfg or MetricConfig()
    ours = _distortion_cepstra(converted, mel_cfg, cfg)
    theirs = _distortion_cepstra(reference, mel_cfg, cfg)
    if ours.shape[1] != theirs.shape[1]:
        raise DataError(f"Cepstra widths differ: {ours.shape[1]} vs {theirs.shape[1]}")
    path = dtw(ours, theirs)
    diff = ours[path.source] - theirs[path.target]
    if diff.shape[0] == 0:
        raise DataError("Nothing left to compare after alignment")
    per_pair = MCD_SCALE * np.sqrt(2.0 * np.sum(diff * diff, axis=1))
    return float(per_pair.mean()), path


def mcd(converted: Signal, reference: Signal, mel_cfg: Optional[MelConfig] = None,
        cfg: Optional[MetricConfig] = None) -> float:
    return mcd_with_path(converted, reference, mel_cfg, cfg)[0]


@dataclass
class F0Comparison:
    rmse: float
    voiced_frames: int
    aligned_frames: int


def f0_comparison(converted: Waveform, reference: Waveform, mel_cfg: Optional[MelConfig] = None,
                  path: Optional[DtwPath] = None, f0_cfg: Optional[F0Config] = None,
                  cfg: Optional[MetricConfig] = None) -> F0Comparison:
    """
    F0 RMSE over aligned frames voiced in both tracks.

    Without ``path`` the tracks are aligned the way ``mcd`` aligns them.

    Raises:
        NoVoicedFramesError: no aligned pair is voiced on both sides
    """
    mel_cfg = mel_cfg or MelConfig()
    if path is None:
        _, path = mcd_with_path(converted, reference, mel_cfg, cfg)
    ours, ours_voiced = extract_f0(converted, mel_cfg, f0_cfg)
    theirs, theirs_voiced = extract_f0(reference, mel_cfg, f0_cfg)
    source = np.minimum(path.source, ours.size - 1)
    target = np.minimum(path.target, theirs.size - 1)
    both = ours_voiced[source] & theirs_voiced[target]
    count = int(np.count_nonzero(both))
    if count == 0:
        raise NoVoicedFramesError("No aligned frame is voiced in both utterances")
    error = ours[source][both] - theirs[target][both]
    return F0Comparison(float(np.sqrt(np.mean(error * error))), count, len(path))


def f0_rmse(converted: Waveform, reference: Waveform, mel_cfg: Optional[MelConfig] = None,
            path: Optional[DtwPath] = None, f0_cfg: Optional[F0Config] = None) -> float:
    return f0_comparison(converted, reference, mel_cfg, path, f0_cfg).rmse


def duration_seconds(frames: int, mel_cfg: MelConfig) -> float:
    return frames * mel_cfg.hop_length / float(mel_cfg.sample_rate)


def ddur(converted: Mapping[str, float], target: Mapping[str, float]) -> float:
    """Mean absolute duration difference over utterances paired by id."""
    unpaired = sorted(set(converted) ^ set(target))
    if unpaired:
        raise DataError(f"Unpaired utterances: {', '.join(unpaired)}")
    if not converted:
        raise DataError("No utterances to compare")
    return float(np.mean([abs(converted[key] - target[key]) for key in sorted(converted)]))


@dataclass
class AlignmentDiagnostics:
    entropy: float
    violations: int
    deviation: float


def alignment_diagnostics(alignment: np.ndarray, reference: Optional[np.ndarray] = None,
                          jump_threshold: int = 3) -> AlignmentDiagnostics:
    """
    Summaries of an attention matrix (decoder steps, encoder states).

    Args:
        alignment: attention rows
        reference: per decoder step the expected encoder index, or the
            (step, index) points from ``align.downsample_path``
        jump_threshold: argmax advances larger than this count as skips

    Returns:
        mean row entropy, number of backward moves or skips of the argmax,
        and the mean distance of the argmax from the reference (0 without one)
    """
    alignment = np.asarray(alignment, dtype=np.float64)
    positive = np.where(alignment > 0, alignment, 1.0)
    entropy = float(np.mean(-np.sum(alignment * np.log(positive), axis=1)))
    peaks = np.argmax(alignment, axis=1)
    moves = np.diff(peaks)
    violations = int(np.count_nonzero((moves < 0) | (moves > jump_threshold)))
    deviation = 0.0
    if reference is not None:
        reference = np.asarray(reference)
        if reference.ndim == 2:
            reference = reference[:, 1]
        steps = min(reference.size, peaks.size)
        deviation = float(np.mean(np.abs(peaks[:steps] - reference[:steps])))
    return AlignmentDiagnostics(entropy, violations, deviation)


@dataclass
class UtteranceMetrics:
    mcd: float
    duration_s: float
    reference_duration_s: float
    aligned_frames: int
    f0_rmse: Optional[float] = None
    voiced_frames: int = 0

    @property
    def duration_difference(self) -> float:
        return abs(self.duration_s - self.reference_duration_s)


def _number(value: float) -> str:
    return f"{value:.6f}"


@dataclass
class MetricReport:
    """Per-utterance metrics, their aggregate and per-item failures."""

    system: str
    utterances: Dict[str, UtteranceMetrics] = field(default_factory=dict)
    errors: Dict[str, str] = field(default_factory=dict)

    @property
    def mcd(self) -> float:
        if not self.utterances:
            return float('nan')
        return float(np.mean([item.mcd for item in self.utterances.values()]))

    @property
    def voiced_frames(self) -> int:
        return sum(item.voiced_frames for item in self.utterances.values())

    @property
    def f0_rmse(self) -> float:
        """Pooled over every mutually voiced frame of the set."""
        voiced = [item for item in self.utterances.values() if item.f0_rmse is not None]
        frames = sum(item.voiced_frames for item in voiced)
        if frames == 0:
            return float('nan')
        return float(math.sqrt(sum(item.f0_rmse ** 2 * item.voiced_frames for item in voiced) / frames))

    @property
    def ddur(self) -> float:
        if not self.utterances:
            return float('nan')
        return ddur(
            {key: item.duration_s for key, item in self.utterances.items()},
            {key: item.reference_duration_s for key, item in self.utterances.items()},
        )

    def aggregate(self) -> Dict[str, float]:
        return {
            'mcd': self.mcd,
            'f0_rmse': self.f0_rmse,
            'ddur': self.ddur,
            'utterances': len(self.utterances),
            'voiced_frames': self.voiced_frames,
            'errors': len(self.errors),
        }

    def to_text(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser['report'] = {'system': self.system}
        for key in sorted(self.utterances):
            item = self.utterances[key]
            section = {
                'mcd': _number(item.mcd),
                'f0_rmse': _number(item.f0_rmse) if item.f0_rmse is not None else 'none',
                'voiced_frames': str(item.voiced_frames),
                'aligned_frames': str(item.aligned_frames),
                'duration_s': _number(item.duration_s),
                'reference_duration_s': _number(item.reference_duration_s),
            }
            parser[f"utterance {key}"] = section
        parser['aggregate'] = {
            name: _number(value) if isinstance(value, float) else str(value)
            for name, value in self.aggregate().items()
        }
        parser['errors'] = {key: self.errors[key] for key in sorted(self.errors)}
        buffer = io.StringIO()
        parser.write(buffer)
        return buffer.getvalue()

    @classmethod
    def from_text(cls, text: str) -> 'MetricReport':
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text)
            report = cls(system=parser.get('report', 'system'))
            for section in parser.sections():
                if not section.startswith('utterance '):
                    continue
                values = parser[section]
                f0 = values.get('f0_rmse')
                report.utterances[section[len('utterance '):]] = UtteranceMetrics(
                    mcd=float(values['mcd']),
                    duration_s=float(values['duration_s']),
                    reference_duration_s=float(values['reference_duration_s']),
                    aligned_frames=int(values['aligned_frames']),
                    f0_rmse=None if f0 == 'none' else float(f0),
                    voiced_frames=int(values['voiced_frames']),
                )
            if parser.has_section('errors'):
                report.errors = dict(parser['errors'])
        except (configparser.Error, KeyError, ValueError) as exc:
            raise DataError(f"Malformed metric report: {exc}") from exc
        return report

    def save(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text(), encoding='utf-8')


def write_pgm(alignment: np.ndarray, path: Union[str, Path]) -> Tuple[int, int]:
    """
    Binary graymap of an attention matrix: one column per decoder step, one
    row per encoder state (state 0 at the top), darker where weight is larger.

    Returns:
        (width, height)
    """
    alignment = np.asarray(alignment, dtype=np.float64)
    if alignment.ndim != 2 or alignment.size == 0:
        raise DataError(f"Expected a nonempty (steps, states) matrix, got {alignment.shape}")
    peak = float(alignment.max())
    scaled = alignment / peak if peak > 0 else np.zeros_like(alignment)
    pixels = np.rint(255.0 * (1.0 - np.clip(scaled, 0.0, 1.0))).astype(np.uint8).T
    height, width = pixels.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{width} {height}\n255\n".encode('ascii') + pixels.tobytes())
    return width, height


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    payload = Path(path).read_bytes()
    parts = payload.split(b'\n', 3)
    if len(parts) != 4 or parts[0] != b'P5':
        raise DataError(f"{path}: not a binary graymap")
    width, height = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(height, width)


def write_matrix_tsv(matrix: np.ndarray, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.asarray(matrix, dtype=np.float64), fmt='%.6g', delimiter='\t')
