"""
Signal-processing front end: STFT, log-mel features, mu-law companding,
autocorrelation pitch tracking and Griffin-Lim reconstruction.

All functions are pure. Frame ``t`` is centered at sample ``t * hop`` so the
frame count of every per-frame track is ``1 + n_samples // hop``.
"""

import logging
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import List, Optional, Tuple

import librosa
import numpy as np

from scent.exceptions import ConfigError, DataError, NonFiniteError


logger = logging.getLogger('acoustics.dsp')

ENERGY_MODES = ('power', 'magnitude')


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.samples.size == 0:
            raise DataError("Waveform is empty")
        if not np.all(np.isfinite(self.samples)):
            raise NonFiniteError("Waveform contains non-finite samples")

    @property
    def duration(self) -> float:
        return self.samples.size / float(self.sample_rate)

    def __len__(self) -> int:
        return int(self.samples.size)


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 16000
    fft_size: int = 1024
    win_length_ms: float = 50.0
    hop_ms: float = 10.0
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-10
    energy: str = 'power'

    @property
    def win_length(self) -> int:
        return int(round(self.sample_rate * self.win_length_ms / 1000.0))

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def validate(self) -> 'MelConfig':
        if self.win_length_ms < self.hop_ms:
            raise ConfigError("win_length_ms must be at least hop_ms")
        if self.win_length > self.fft_size:
            raise ConfigError("The analysis window must fit inside fft_size")
        if self.hop_length < 1:
            raise ConfigError("hop_ms is shorter than one sample")
        if not 0 < self.n_mels < self.n_bins:
            raise ConfigError(f"n_mels must be in (0, {self.n_bins})")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ConfigError("Mel band edges must satisfy 0 <= fmin < fmax <= sample_rate/2")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")
        if self.energy not in ENERGY_MODES:
            raise ConfigError(f"energy must be one of {ENERGY_MODES}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class F0Config:
    window_ms: float = 40.0
    fmin: float = 60.0
    fmax: float = 400.0
    threshold: float = 0.45
    octave_tolerance: float = 0.1


def frame_count(n_samples: int, cfg: MelConfig) -> int:
    return 1 + n_samples // cfg.hop_length


def _stft(samples: np.ndarray, cfg: MelConfig, pad_mode: str = 'reflect') -> np.ndarray:
    try:
        spectrum = librosa.stft(
            samples,
            n_fft=cfg.fft_size,
            hop_length=cfg.hop_length,
            win_length=cfg.win_length,
            window='hann',
            center=True,
            pad_mode=pad_mode,
        )
    except librosa.util.exceptions.ParameterError as exc:
        raise DataError(f"STFT failed: {exc}") from exc
    return spectrum


def stft_magnitude(waveform: Waveform, cfg: MelConfig) -> np.ndarray:
    """Magnitude spectra, shape (frames, fft_size // 2 + 1)."""
    return np.abs(_stft(waveform.samples, cfg)).T


@lru_cache(maxsize=16)
def _cached_filterbank(sample_rate, fft_size, n_mels, fmin, fmax) -> np.ndarray:
    bank = librosa.filters.mel(
        sr=sample_rate, n_fft=fft_size, n_mels=n_mels,
        fmin=fmin, fmax=fmax, htk=False, norm=None,
    ).astype(np.float64)
    bank.setflags(write=False)
    return bank


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Peak-normalized triangular filters, shape (n_mels, fft_size // 2 + 1)."""
    return _cached_filterbank(cfg.sample_rate, cfg.fft_size, cfg.n_mels, cfg.fmin, cfg.fmax)


def mel_spectrogram(waveform: Waveform, cfg: MelConfig) -> np.ndarray:
    """
    Natural-log mel energies, shape (frames, n_mels).

    Args:
        waveform: input audio
        cfg: analysis settings; ``cfg.energy`` selects magnitude or power

    Returns:
        np.ndarray: ``log(max(filterbank @ energy, log_floor))``
    """
    magnitude = stft_magnitude(waveform, cfg)
    energy = magnitude ** 2 if cfg.energy == 'power' else magnitude
    mel = energy @ mel_filterbank(cfg).T
    return np.log(np.maximum(mel, cfg.log_floor))


def mu_law(waveform: Waveform, bits: int = 10) -> np.ndarray:
    """Compand and quantize to integer levels in ``[0, 2**bits - 1]``."""
    samples = waveform.samples
    if np.any(np.abs(samples) > 1.0):
        raise DataError("mu-law input must lie in [-1, 1]")
    top = 2 ** bits - 1
    companded = librosa.mu_compress(samples, mu=top, quantize=False)
    levels = np.floor((companded + 1.0) / 2.0 * top + 0.5).astype(np.int64)
    return np.clip(levels, 0, top)


def mu_law_inverse(levels: np.ndarray, bits: int = 10, sample_rate: int = 16000) -> Waveform:
    top = 2 ** bits - 1
    levels = np.asarray(levels)
    if np.any(levels < 0) or np.any(levels > top):
        raise DataError(f"mu-law levels must lie in [0, {top}]")
    companded = 2.0 * levels.astype(np.float64) / top - 1.0
    return Waveform(librosa.mu_expand(companded, mu=top, quantize=False), sample_rate)


def _normalized_autocorrelation(frames: np.ndarray, min_lag: int, max_lag: int) -> np.ndarray:
    """Per-frame normalized autocorrelation for lags ``min_lag..max_lag``."""
    width = frames.shape[1]
    spectrum = np.fft.rfft(frames, n=2 * width, axis=1)
    raw = np.fft.irfft(spectrum * np.conj(spectrum), n=2 * width, axis=1)[:, :width]
    cumulative = np.concatenate(
        [np.zeros((frames.shape[0], 1)), np.cumsum(frames * frames, axis=1)], axis=1
    )
    lags = np.arange(min_lag, max_lag + 1)
    head_energy = cumulative[:, width - lags]
    tail_energy = cumulative[:, width:width + 1] - cumulative[:, lags]
    denominator = np.sqrt(head_energy * tail_energy)
    numerator = raw[:, lags]
    out = np.zeros_like(numerator)
    np.divide(numerator, denominator, out=out, where=denominator > 1e-12)
    return out


def extract_f0(waveform: Waveform, cfg: MelConfig, f0_cfg: Optional[F0Config] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Autocorrelation pitch track aligned with the mel frames.

    Returns:
        (f0 in Hz with 0 for unvoiced frames, boolean voiced flags)
    """
    f0_cfg = f0_cfg or F0Config()
    sr = waveform.sample_rate
    width = int(round(sr * f0_cfg.window_ms / 1000.0))
    min_lag = max(1, int(np.floor(sr / f0_cfg.fmax)))
    max_lag = min(width - 2, int(np.ceil(sr / f0_cfg.fmin)))
    n_frames = frame_count(len(waveform), cfg)
    hop = cfg.hop_length

    padded = np.pad(waveform.samples, (width // 2, width - width // 2 + hop))
    frames = np.lib.stride_tricks.sliding_window_view(padded, width)[::hop][:n_frames]
    frames = frames - frames.mean(axis=1, keepdims=True)
    corr = _normalized_autocorrelation(frames, min_lag, max_lag)

    f0 = np.zeros(n_frames)
    voiced = np.zeros(n_frames, dtype=bool)
    for t in range(n_frames):
        row = corr[t]
        best = row.max()
        if best < f0_cfg.threshold:
            continue
        cutoff = (1.0 - f0_cfg.octave_tolerance) * best
        peaks = [
            i for i in range(1, row.size - 1)
            if row[i] >= cutoff and row[i] >= row[i - 1] and row[i] >= row[i + 1]
        ]
        index = peaks[0] if peaks else int(np.argmax(row))
        lag = float(min_lag + index)
        if 0 < index < row.size - 1:
            curvature = row[index - 1] - 2.0 * row[index] + row[index + 1]
            if curvature < 0:
                lag += 0.5 * (row[index - 1] - row[index + 1]) / curvature
        f0[t] = sr / lag
        voiced[t] = True
    return f0, voiced


def griffin_lim(
    mel: np.ndarray,
    cfg: MelConfig,
    iterations: int = 32,
    history: Optional[List[float]] = None,
    normalize: bool = True,
) -> Waveform:
    """
    Reconstruct audio from log-mel features.

    Mel energies are mapped back to linear bins by non-negative least squares,
    then phases are estimated from a zero-phase start. The inner projections
    use zero-padded framing so each iteration is an exact least-squares
    projection; ``history`` receives the normalized inconsistency
    ``||STFT(ISTFT(Y)) - Y|| / ||Y||`` per iteration, which never increases.
    """
    mel = np.asarray(mel, dtype=np.float64)
    if not np.all(np.isfinite(mel)):
        raise NonFiniteError("Mel input to Griffin-Lim is not finite")
    if mel.ndim != 2 or mel.shape[1] != cfg.n_mels:
        raise DataError(f"Expected a (frames, {cfg.n_mels}) mel matrix, got {mel.shape}")
    energy = librosa.util.nnls(mel_filterbank(cfg), np.exp(mel).T)
    magnitude = np.sqrt(np.maximum(energy, 0.0)) if cfg.energy == 'power' else np.maximum(energy, 0.0)
    n_samples = max(1, (mel.shape[0] - 1) * cfg.hop_length)
    reference = float(np.linalg.norm(magnitude)) or 1.0

    def synthesize(spectrum):
        return librosa.istft(
            spectrum, hop_length=cfg.hop_length, win_length=cfg.win_length,
            n_fft=cfg.fft_size, window='hann', center=True, length=n_samples,
        )

    phase = np.ones_like(magnitude, dtype=np.complex128)
    for _ in range(iterations):
        target = magnitude * phase
        rebuilt = _stft(synthesize(target), cfg, pad_mode='constant')
        if history is not None:
            history.append(float(np.linalg.norm(rebuilt - target)) / reference)
        phase = rebuilt / np.maximum(np.abs(rebuilt), 1e-16)

    samples = synthesize(magnitude * phase)
    peak = float(np.max(np.abs(samples)))
    if normalize and peak >= 1e-4:
        samples = samples / peak
    return Waveform(samples, cfg.sample_rate)


def upsample_by_repetition(coarse: np.ndarray, factor: int, n_frames: int) -> np.ndarray:
    """Repeat each row ``factor`` times and fit to ``n_frames`` rows (last row extends)."""
    if factor < 1:
        raise ConfigError("Upsampling factor must be at least 1")
    fine = np.repeat(np.asarray(coarse), factor, axis=0)
    if fine.shape[0] >= n_frames:
        return fine[:n_frames]
    tail = np.repeat(fine[-1:], n_frames - fine.shape[0], axis=0)
    return np.concatenate([fine, tail], axis=0)
