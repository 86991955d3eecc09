import factory

from acoustics.dsp import MelConfig
from acoustics.synth import ContentSpec, CorpusSpec, VoiceSpec, WarpSpec


class MelConfigFactory(factory.Factory):
    """Small analysis settings: 8 kHz audio, 16 mel bands."""

    class Meta:
        model = MelConfig

    sample_rate = 8000
    fft_size = 256
    win_length_ms = 25.0
    hop_ms = 10.0
    n_mels = 16
    fmin = 0.0
    fmax = 4000.0
    log_floor = 1e-10
    energy = 'power'


class VoiceSpecFactory(factory.Factory):
    class Meta:
        model = VoiceSpec

    f0_base = 120.0
    formant_scale = 1.0
    tilt = 0.6
    rate = 1.0
    noise_level = 1e-3


class WarpSpecFactory(factory.Factory):
    class Meta:
        model = WarpSpec

    ratio = 0.8
    knots = factory.LazyFunction(lambda: [(0.0, 0.0), (0.5, 0.45), (1.0, 1.0)])
    jitter_seed = factory.Sequence(lambda n: n)


class ContentSpecFactory(factory.Factory):
    class Meta:
        model = ContentSpec

    symbols = factory.LazyFunction(lambda: [0, 3, 1, 5, 2])
    durations = factory.LazyFunction(lambda: [8, 6, 10, 5, 7])


class CorpusSpecFactory(factory.Factory):
    class Meta:
        model = CorpusSpec

    n_train = 4
    n_val = 1
    n_test = 2
    seed = factory.Sequence(lambda n: n)
    min_frames = 20
    max_frames = 60
    alphabet_size = 6
    min_symbols = 3
    max_symbols = 6
    min_symbol_frames = 3
    max_symbol_frames = 8
    warp_ratio = 0.8
    warp_jitter = 0.08
    aux_upsample = 2
    noise_level = 1e-4
    workers = 1
