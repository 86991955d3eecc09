"""
The SCENT sequence-to-sequence acoustic model.

Pyramid bidirectional encoder with layer-normalized LSTM cells and location
codes, PreNet, attention LSTM, hybrid (content + location) scores with forward
attention, stacked decoder LSTMs, MSE or Gaussian-mixture output head,
completion head and convolutional PostNet.

All graph code is batched: tensors are (batch, time, features) and padded
positions are described by masks. Single utterances use batch size 1.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import special

from .exceptions import (
    ConfigError, DegenerateAlignmentError, ShapeError, StepCapExceeded,
)
from .numerics import Node, ParamStore, Tape


logger = logging.getLogger('scent.model')

OUTPUT_MODES = ('mse', 'gmm')
INPUT_FEATURES = ('both', 'mel', 'aux')
MASK_SCORE = -1e9
ALIGNMENT_FLOOR = 1e-20
DEGENERATE_MASS = 1e-12


@dataclass
class ModelConfig:
    d_mel: int = 80
    d_aux: int = 16
    encoder_layers: int = 2
    encoder_units: int = 256
    M: int = 4
    per_layer_factor: int = 2
    prenet_units: int = 256
    attn_units: int = 256
    attn_filters: int = 10
    attn_kernel: int = 32
    attn_v_dim: int = 256
    decoder_layers: int = 2
    decoder_units: int = 256
    postnet_channels: int = 256
    postnet_bank: int = 8
    r: int = 2
    mixtures: int = 2
    output_mode: str = 'gmm'
    zoneout_p: float = 0.2
    prenet_dropout: float = 0.5
    postnet_dropout: float = 0.2
    prenet_dropout_at_inference: bool = False
    use_location_code: bool = True
    use_attention: bool = True
    input_features: str = 'both'

    def validate(self) -> 'ModelConfig':
        if self.M != self.per_layer_factor ** self.encoder_layers:
            raise ConfigError(
                f"M={self.M} must equal per_layer_factor^encoder_layers "
                f"({self.per_layer_factor}^{self.encoder_layers})"
            )
        if self.output_mode not in OUTPUT_MODES:
            raise ConfigError(f"output_mode must be one of {OUTPUT_MODES}")
        if self.input_features not in INPUT_FEATURES:
            raise ConfigError(f"input_features must be one of {INPUT_FEATURES}")
        if self.mixtures < 1 or self.r < 1:
            raise ConfigError("mixtures and r must be at least 1")
        if self.use_location_code and self.d_mel % 2:
            raise ConfigError("Location codes need an even d_mel")
        for name in ('d_mel', 'encoder_layers', 'encoder_units', 'per_layer_factor', 'prenet_units',
                     'attn_units', 'attn_filters', 'attn_kernel', 'attn_v_dim', 'decoder_layers',
                     'decoder_units', 'postnet_channels', 'postnet_bank'):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.input_features != 'mel' and self.d_aux < 1:
            raise ConfigError("Auxiliary input needs d_aux >= 1")
        for name in ('zoneout_p', 'prenet_dropout', 'postnet_dropout'):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")
        return self

    @property
    def d_in(self) -> int:
        return {'both': self.d_mel + self.d_aux, 'mel': self.d_mel, 'aux': self.d_aux}[self.input_features]

    @property
    def d_enc(self) -> int:
        return 2 * self.encoder_units

    @property
    def frame_dim(self) -> int:
        return self.r * self.d_mel

    @property
    def output_dim(self) -> int:
        if self.output_mode == 'gmm':
            return (2 * self.frame_dim + 1) * self.mixtures
        return self.frame_dim

    def to_dict(self) -> dict:
        return asdict(self)


def location_code(n: int, d: int) -> np.ndarray:
    """Sinusoidal code: entry 2i is sin(n / 10000^(2i/d)), entry 2i+1 the cosine."""
    if d % 2:
        raise ShapeError(f"Location code dimension must be even, got {d}")
    if n < 0:
        raise ValueError("Location code position must be nonnegative")
    return location_codes(1, d, offset=n)[0]


def location_codes(count: int, d: int, offset: int = 0) -> np.ndarray:
    if d % 2:
        raise ShapeError(f"Location code dimension must be even, got {d}")
    positions = np.arange(offset, offset + count, dtype=np.float64)[:, None]
    angles = positions / np.power(10000.0, 2.0 * np.arange(d // 2) / d)[None, :]
    codes = np.empty((count, d))
    codes[:, 0::2] = np.sin(angles)
    codes[:, 1::2] = np.cos(angles)
    return codes


def model_inputs(mel: np.ndarray, aux: Optional[np.ndarray], cfg: ModelConfig) -> np.ndarray:
    """Select the encoder input channels for ``cfg.input_features``."""
    if cfg.input_features == 'mel':
        return np.asarray(mel, dtype=np.float64)
    if aux is None:
        raise ShapeError("Auxiliary features are required by this model")
    if aux.shape[0] != mel.shape[0]:
        raise ShapeError(f"mel has {mel.shape[0]} frames but aux has {aux.shape[0]}")
    if cfg.input_features == 'aux':
        return np.asarray(aux, dtype=np.float64)
    return np.concatenate([mel, aux], axis=1).astype(np.float64)


def pad_to_multiple(x: np.ndarray, lengths: Sequence[int], multiple: int) -> np.ndarray:
    """Right-pad (batch, time, dim) to a multiple of ``multiple`` with each sequence's last valid frame."""
    batch, steps, dim = x.shape
    total = int(math.ceil(steps / multiple)) * multiple
    out = np.empty((batch, total, dim), dtype=x.dtype)
    for b, length in enumerate(lengths):
        out[b, :length] = x[b, :length]
        out[b, length:] = x[b, length - 1]
    return out


@dataclass
class FeatureStats:
    """Per-dimension normalization of encoder inputs and target mels."""

    input_mean: np.ndarray
    input_std: np.ndarray
    target_mean: np.ndarray
    target_std: np.ndarray

    @classmethod
    def identity(cls, cfg: ModelConfig) -> 'FeatureStats':
        return cls(np.zeros(cfg.d_in), np.ones(cfg.d_in), np.zeros(cfg.d_mel), np.ones(cfg.d_mel))

    @classmethod
    def from_sequences(cls, inputs: Sequence[np.ndarray], targets: Sequence[np.ndarray]) -> 'FeatureStats':
        def moments(sequences):
            stacked = np.concatenate([np.asarray(s, dtype=np.float64) for s in sequences], axis=0)
            std = stacked.std(axis=0)
            return stacked.mean(axis=0), np.where(std < 1e-6, 1.0, std)
        input_mean, input_std = moments(inputs)
        target_mean, target_std = moments(targets)
        return cls(input_mean, input_std, target_mean, target_std)

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {f"stats.{name}": np.asarray(value) for name, value in asdict(self).items()}

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> 'FeatureStats':
        return cls(**{name[len('stats.'):]: np.asarray(value, dtype=np.float64)
                      for name, value in arrays.items() if name.startswith('stats.')})

    def normalize_input(self, x):
        return (x - self.input_mean) / self.input_std

    def normalize_target(self, y):
        return (y - self.target_mean) / self.target_std

    def denormalize_target(self, y):
        return y * self.target_std + self.target_mean


class MaskSource:
    """
    Draws dropout and zoneout masks from a generator.

    Outside training every mask is ``None`` (the op is skipped), except PreNet
    dropout when ``prenet_dropout_at_inference`` is set.
    """

    def __init__(self, cfg: ModelConfig, rng: Optional[np.random.Generator] = None, training: bool = False):
        self.cfg = cfg
        self.rng = rng
        self.training = training

    def _draw(self, shape) -> np.ndarray:
        if self.rng is None:
            raise ValueError("A random generator is required to draw masks")
        return self.rng.random(shape)

    def dropout(self, shape, p: float, at_inference: bool = False) -> Optional[np.ndarray]:
        if p <= 0 or not (self.training or at_inference):
            return None
        return (self._draw(shape) >= p).astype(np.float64)

    def zoneout(self, shape) -> Optional[np.ndarray]:
        if self.cfg.zoneout_p <= 0 or not self.training:
            return None
        return (self._draw(shape) < self.cfg.zoneout_p).astype(np.float64)


def lstm_cell(tape: Tape, prefix: str, x: Node, h: Node, c: Node,
              layer_norm: bool = False, keep_mask: Optional[np.ndarray] = None) -> Tuple[Node, Node, Node]:
    """
    One LSTM step (gate order i, f, g, o).

    ``keep_mask`` is 1 where the previous state is kept (zoneout or padding).

    Returns:
        (carried h, carried c, raw cell output h before the keep mask)
    """
    units = h.shape[-1]
    z = tape.affine(tape.concat([x, h]), tape.param(f"{prefix}.W"), tape.param(f"{prefix}.b"))
    if layer_norm:
        z = tape.layer_norm(z, tape.param(f"{prefix}.ln_gain"), tape.param(f"{prefix}.ln_bias"))
    gate_in = tape.sigmoid(z[..., 0:units])
    gate_forget = tape.sigmoid(z[..., units:2 * units])
    candidate = tape.tanh(z[..., 2 * units:3 * units])
    gate_out = tape.sigmoid(z[..., 3 * units:4 * units])
    c_new = gate_forget * c + gate_in * candidate
    cell = c_new
    if layer_norm:
        cell = tape.layer_norm(c_new, tape.param(f"{prefix}.cell_ln_gain"), tape.param(f"{prefix}.cell_ln_bias"))
    h_new = gate_out * tape.tanh(cell)
    return tape.zoneout(h_new, h, keep_mask), tape.zoneout(c_new, c, keep_mask), h_new


def _keep_mask(zoneout: Optional[np.ndarray], padded: np.ndarray) -> Optional[np.ndarray]:
    """Merge a zoneout mask with a (batch, 1) padding indicator."""
    if zoneout is None:
        return padded if np.any(padded) else None
    return np.maximum(zoneout, padded)


def stack_steps(tape: Tape, steps: Sequence[Node]) -> Node:
    """List of (batch, d) nodes -> (batch, steps, d)."""
    batch, dim = steps[0].shape
    return tape.concat(list(steps), axis=-1).reshape(batch, len(steps), dim)


def attention_scores(tape: Tape, query: Node, states: Node, alpha_prev: Node,
                     state_mask: Optional[np.ndarray] = None, keys: Optional[Node] = None) -> Node:
    """
    Hybrid scores ``e_n = q . (h_n W) + v . tanh(U f_n + b)`` with ``f = F * alpha_prev``.

    Args:
        query: (batch, attn_units)
        states: encoder states (batch, T_h, d_enc)
        alpha_prev: previous alignment (batch, T_h)
        state_mask: 1 for real encoder states; padded states get a score of -1e9
        keys: precomputed ``states @ W``

    Returns:
        Node: raw scores (batch, T_h)
    """
    batch, length = alpha_prev.shape
    if keys is None:
        keys = tape.matmul(states, tape.param('attention.W'))
    if query.shape[-1] != keys.shape[-1]:
        raise ShapeError(f"Query width {query.shape[-1]} does not match key width {keys.shape[-1]}")
    content = tape.sum(keys * query.reshape(batch, 1, query.shape[-1]), axis=-1)
    filters = tape.param('attention.F')
    features = tape.conv1d(
        alpha_prev.reshape(batch, length, 1), filters, tape.constant(np.zeros(filters.shape[-1]))
    )
    hidden = tape.tanh(tape.affine(features, tape.param('attention.U'), tape.param('attention.b')))
    location = tape.matmul(hidden, tape.param('attention.v')).reshape(batch, length)
    scores = content + location
    if state_mask is not None and not np.all(state_mask):
        scores = scores + MASK_SCORE * (1.0 - np.asarray(state_mask, dtype=np.float64))
    return scores


def initial_alignment(batch: int, length: int) -> np.ndarray:
    alpha = np.zeros((batch, length))
    alpha[:, 0] = 1.0
    return alpha


def forward_attention_step(tape: Tape, scores, alpha_prev) -> Node:
    """
    ``alpha_t = norm(softmax(e_t) * (alpha_{t-1} + shift(alpha_{t-1})))``.

    Mass can move at most one encoder state per step.

    Raises:
        DegenerateAlignmentError: the un-normalized mass of a row fell below 1e-12
    """
    scores = tape.lift(scores)
    alpha_prev = tape.lift(alpha_prev)
    batch, length = alpha_prev.shape
    probs = tape.softmax(scores, axis=-1)
    if length > 1:
        shifted = tape.concat([tape.constant(np.zeros((batch, 1))), alpha_prev[:, 0:length - 1]], axis=-1)
        reach = alpha_prev + shifted
    else:
        reach = alpha_prev
    unnormalized = probs * reach
    total = tape.sum(unnormalized, axis=-1, keepdims=True)
    if np.any(total.value < DEGENERATE_MASS):
        logger.warning(
            "Forward attention lost its mass",
            extra={'event_type': 'degenerate_alignment', 'min_mass': float(total.value.min())}
        )
        raise DegenerateAlignmentError("Forward-attention mass vanished before renormalization")
    return unnormalized / (total + ALIGNMENT_FLOOR)


def context_vector(tape: Tape, alpha, states: Node) -> Node:
    """Convex combination ``c = sum_n alpha_n h_n``."""
    alpha = tape.lift(alpha)
    batch, length = alpha.shape
    return tape.matmul(alpha.reshape(batch, 1, length), states).reshape(batch, states.shape[-1])


@dataclass
class GmmParams:
    log_weights: Node
    weights: Node
    sigma: Node
    mean: Node


def gmm_partition(tape: Tape, o, mixtures: int, dim: int) -> GmmParams:
    """
    Split ``o = [w (m), sigma (m*D), mu (m*D)]`` along its last axis.

    Weights are a softmax, deviations a softplus, means the identity.
    """
    o = tape.lift(o)
    if o.shape[-1] != (2 * dim + 1) * mixtures:
        raise ShapeError(f"GMM output must have {(2 * dim + 1) * mixtures} entries, got {o.shape[-1]}")
    lead = o.shape[:-1]
    logits = o[..., 0:mixtures]
    sigma_raw = o[..., mixtures:mixtures + mixtures * dim].reshape(lead + (mixtures, dim))
    mean = o[..., mixtures + mixtures * dim:].reshape(lead + (mixtures, dim))
    log_weights = logits - tape.logsumexp(logits, axis=-1, keepdims=True)
    return GmmParams(log_weights, tape.exp(log_weights), tape.softplus(sigma_raw), mean)


def gmm_select_mean(tape: Tape, gmm: GmmParams) -> Node:
    """Mean of the heaviest component (lowest index on ties); gradients reach only that mean."""
    weights = gmm.weights.value
    choice = np.argmax(weights, axis=-1)
    one_hot = np.zeros(weights.shape + (1,))
    np.put_along_axis(one_hot, choice[..., None, None], 1.0, axis=-2)
    return tape.sum(gmm.mean * one_hot, axis=-2)


def gmm_nll(tape: Tape, gmm: GmmParams, target, mask: Optional[np.ndarray] = None) -> Node:
    """
    Per-item negative log-likelihood of ``target`` (..., D) under a diagonal mixture.

    ``mask`` (..., D) marks the valid dimensions; masked ones drop out of the
    density entirely.
    """
    target = tape.lift(target)
    lead = target.shape[:-1]
    dim = target.shape[-1]
    standardized = (target.reshape(lead + (1, dim)) - gmm.mean) / gmm.sigma
    squared = standardized * standardized
    log_sigma = tape.log(gmm.sigma)
    if mask is None:
        constant = 0.5 * dim * math.log(2.0 * math.pi)
    else:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != lead + (dim,):
            raise ShapeError(f"NLL mask shape {mask.shape} does not match targets {lead + (dim,)}")
        squared = squared * mask[..., None, :]
        log_sigma = log_sigma * mask[..., None, :]
        constant = 0.5 * math.log(2.0 * math.pi) * mask.sum(axis=-1)[..., None]
    log_density = -0.5 * tape.sum(squared, axis=-1) - tape.sum(log_sigma, axis=-1) - constant
    return -tape.logsumexp(gmm.log_weights + log_density, axis=-1)


@dataclass
class EncoderStates:
    states: Node
    mask: np.ndarray
    lengths: np.ndarray
    keys: Optional[Node] = None

    @property
    def length(self) -> int:
        return self.states.shape[1]


@dataclass
class DecoderState:
    attention: Tuple[Node, Node]
    layers: List[Tuple[Node, Node]]
    context: Node
    alignment: Node


@dataclass
class DecoderStepOutput:
    raw: Node
    frames: Node
    gmm: Optional[GmmParams]
    end_logit: Node
    alignment: Node
    context: Node
    query: Node

    @property
    def p_end(self) -> np.ndarray:
        return special.expit(self.end_logit.value.reshape(-1))


@dataclass
class ForwardOutput:
    raw: Node
    frames: Node
    post: Node
    end_logits: Node
    alignment: np.ndarray
    encoder: EncoderStates


@dataclass
class ConversionResult:
    frames: np.ndarray
    decoder_frames: np.ndarray
    normalized: np.ndarray
    alignment: np.ndarray
    p_end: np.ndarray
    cap_hit: bool
    steps: int
    encoder_length: int = 0

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])


def _glorot(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def parameter_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Canonical parameter names and shapes for ``cfg``."""
    shapes: Dict[str, Tuple[int, ...]] = {}

    def lstm(prefix, d_in, units, layer_norm=False):
        shapes[f"{prefix}.W"] = (d_in + units, 4 * units)
        shapes[f"{prefix}.b"] = (4 * units,)
        if layer_norm:
            shapes[f"{prefix}.ln_gain"] = (4 * units,)
            shapes[f"{prefix}.ln_bias"] = (4 * units,)
            shapes[f"{prefix}.cell_ln_gain"] = (units,)
            shapes[f"{prefix}.cell_ln_bias"] = (units,)

    d_in = cfg.d_in
    for j in range(cfg.encoder_layers):
        layer_in = cfg.per_layer_factor * (d_in if j == 0 else cfg.d_enc)
        for direction in ('fw', 'bw'):
            lstm(f"encoder.layer{j}.{direction}", layer_in, cfg.encoder_units, layer_norm=True)

    shapes['decoder.prenet.fc1.W'] = (cfg.d_mel, cfg.prenet_units)
    shapes['decoder.prenet.fc1.b'] = (cfg.prenet_units,)
    shapes['decoder.prenet.fc2.W'] = (cfg.prenet_units, cfg.prenet_units)
    shapes['decoder.prenet.fc2.b'] = (cfg.prenet_units,)
    lstm('decoder.attention_lstm', cfg.prenet_units + cfg.d_enc, cfg.attn_units)

    if cfg.use_attention:
        shapes['attention.F'] = (cfg.attn_kernel, 1, cfg.attn_filters)
        shapes['attention.U'] = (cfg.attn_filters, cfg.attn_v_dim)
        shapes['attention.b'] = (cfg.attn_v_dim,)
        shapes['attention.v'] = (cfg.attn_v_dim, 1)
        shapes['attention.W'] = (cfg.d_enc, cfg.attn_units)

    for i in range(1, cfg.decoder_layers + 1):
        layer_in = cfg.attn_units + cfg.d_enc if i == 1 else cfg.decoder_units
        lstm(f"decoder.lstm{i}", layer_in, cfg.decoder_units)

    proj_in = cfg.d_enc + cfg.attn_units + cfg.decoder_units
    shapes['decoder.frame_proj.W'] = (proj_in, cfg.output_dim)
    shapes['decoder.frame_proj.b'] = (cfg.output_dim,)
    shapes['decoder.end_proj.W'] = (cfg.d_enc + cfg.attn_units, 1)
    shapes['decoder.end_proj.b'] = (1,)

    channels = cfg.postnet_channels
    for k in range(1, cfg.postnet_bank + 1):
        shapes[f"postnet.bank{k}.W"] = (k, cfg.d_mel, channels)
        shapes[f"postnet.bank{k}.b"] = (channels,)
    shapes['postnet.conv1.W'] = (3, cfg.postnet_bank * channels, channels)
    shapes['postnet.conv1.b'] = (channels,)
    shapes['postnet.conv2.W'] = (3, channels, cfg.d_mel)
    shapes['postnet.conv2.b'] = (cfg.d_mel,)
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float64) -> ParamStore:
    """Glorot-uniform weights, zero biases, unit layer-norm gains, forget-gate bias 1."""
    rng = np.random.default_rng(seed)
    store = ParamStore(dtype)
    for name, shape in sorted(parameter_shapes(cfg).items()):
        leaf = name.rsplit('.', 1)[1]
        if leaf in ('ln_gain', 'cell_ln_gain'):
            value = np.ones(shape)
        elif leaf in ('b', 'ln_bias', 'cell_ln_bias'):
            value = np.zeros(shape)
            # LSTM gates are ordered i, f, g, o; layer-normalized cells take the forget bias after the norm.
            if leaf == 'ln_bias' or (leaf == 'b' and name.startswith('decoder.') and 'lstm' in name):
                units = shape[0] // 4
                value[units:2 * units] = 1.0
        elif len(shape) == 3:
            value = _glorot(rng, shape, shape[0] * shape[1], shape[0] * shape[2])
        else:
            value = _glorot(rng, shape, shape[0], shape[-1])
        store.add(name, value)
    return store


class ScentModel:
    """
    Parameters, normalization statistics and the graph-building code.

    Graph methods take a ``Tape``; the same code serves teacher-forced
    training (recording) and autoregressive conversion (``record=False``).
    """

    def __init__(self, cfg: ModelConfig, params: Optional[ParamStore] = None,
                 stats: Optional[FeatureStats] = None, seed: int = 0, dtype=np.float64):
        self.cfg = cfg.validate()
        self.params = params if params is not None else init_params(cfg, seed, dtype)
        missing = sorted(set(parameter_shapes(cfg)) - set(self.params.names()))
        if missing:
            raise ConfigError(f"Parameter store lacks {len(missing)} parameters, e.g. '{missing[0]}'")
        self.stats = stats or FeatureStats.identity(cfg)

    # Encoder

    def encode(self, tape: Tape, x: np.ndarray, lengths: Sequence[int], masks: MaskSource) -> EncoderStates:
        """
        Pyramid bidirectional encoding of normalized inputs (batch, T_x, d_in).

        Inputs are right-padded to a multiple of M with each sequence's last
        frame, so a sequence of length T_x yields ceil(T_x / M) states.
        """
        cfg = self.cfg
        lengths = np.asarray(lengths, dtype=np.int64)
        if x.ndim != 3 or x.shape[-1] != cfg.d_in:
            raise ShapeError(f"Encoder input must be (batch, time, {cfg.d_in}), got {x.shape}")
        if np.any(lengths < 1) or np.any(lengths > x.shape[1]):
            raise ShapeError("Sequence lengths must lie in [1, T_x]")
        state_lengths = -(-lengths // cfg.M)
        layer = tape.constant(pad_to_multiple(x, lengths, cfg.M))
        valid = state_lengths * cfg.M
        units = cfg.encoder_units
        step_valid = None

        for j in range(cfg.encoder_layers):
            batch, steps, dim = layer.shape
            steps //= cfg.per_layer_factor
            valid = valid // cfg.per_layer_factor
            layer = layer.reshape(batch, steps, dim * cfg.per_layer_factor)
            step_valid = (np.arange(steps)[None, :] < valid[:, None]).astype(np.float64)
            directions = []
            for direction, order in (('fw', range(steps)), ('bw', range(steps - 1, -1, -1))):
                prefix = f"encoder.layer{j}.{direction}"
                h = tape.constant(np.zeros((batch, units)))
                c = tape.constant(np.zeros((batch, units)))
                outputs: List[Optional[Node]] = [None] * steps
                for t in order:
                    padded = (1.0 - step_valid[:, t])[:, None]
                    keep = _keep_mask(masks.zoneout((batch, units)), padded)
                    h, c, _ = lstm_cell(tape, prefix, layer[:, t, :], h, c, layer_norm=True, keep_mask=keep)
                    outputs[t] = h
                directions.append(stack_steps(tape, outputs))
            layer = tape.concat(directions, axis=-1)

        if cfg.use_location_code:
            layer = layer + location_codes(layer.shape[1], cfg.d_enc)
        keys = tape.matmul(layer, tape.param('attention.W')) if cfg.use_attention else None
        return EncoderStates(layer, step_valid, state_lengths, keys)

    # Decoder

    def initial_state(self, tape: Tape, encoder: EncoderStates) -> DecoderState:
        cfg = self.cfg
        batch = encoder.states.shape[0]

        def zeros(width):
            return tape.constant(np.zeros((batch, width)))

        return DecoderState(
            attention=(zeros(cfg.attn_units), zeros(cfg.attn_units)),
            layers=[(zeros(cfg.decoder_units), zeros(cfg.decoder_units)) for _ in range(cfg.decoder_layers)],
            context=zeros(cfg.d_enc),
            alignment=tape.constant(initial_alignment(batch, encoder.length)),
        )

    def prenet(self, tape: Tape, frame: Node, masks: MaskSource) -> Node:
        cfg = self.cfg
        out = frame
        for index in (1, 2):
            out = tape.relu(tape.affine(
                out, tape.param(f"decoder.prenet.fc{index}.W"), tape.param(f"decoder.prenet.fc{index}.b")
            ))
            mask = masks.dropout(out.shape, cfg.prenet_dropout, at_inference=cfg.prenet_dropout_at_inference)
            out = tape.dropout(out, mask, 1.0 - cfg.prenet_dropout)
        return out

    def hard_alignment(self, step: int, encoder: EncoderStates) -> np.ndarray:
        """One-hot row at encoder state (step * r) // M, clipped to each sequence."""
        batch = encoder.states.shape[0]
        index = np.minimum((step * self.cfg.r) // self.cfg.M, encoder.lengths - 1)
        alpha = np.zeros((batch, encoder.length))
        alpha[np.arange(batch), index] = 1.0
        return alpha

    def decoder_step(self, tape: Tape, prev_frame, step: int, state: DecoderState,
                     encoder: EncoderStates, masks: MaskSource) -> Tuple[DecoderStepOutput, DecoderState]:
        """
        One decoder step: PreNet, attention LSTM, attention, decoder LSTMs, heads.

        Args:
            prev_frame: (batch, d_mel) last frame of the previous step (zeros at step 0)
            step: decoder step index, also the location-code position
            state: carried recurrent state
            encoder: encoder states of the batch

        Returns:
            (step output, next state)
        """
        cfg = self.cfg
        prev_frame = tape.lift(prev_frame)
        batch = prev_frame.shape[0]
        if cfg.use_location_code:
            prev_frame = prev_frame + location_code(step, cfg.d_mel)
        pre = self.prenet(tape, prev_frame, masks)

        h_att, c_att = state.attention
        keep = masks.zoneout((batch, cfg.attn_units))
        h_att, c_att, query = lstm_cell(
            tape, 'decoder.attention_lstm', tape.concat([pre, state.context]), h_att, c_att, keep_mask=keep
        )

        if cfg.use_attention:
            scores = attention_scores(tape, query, encoder.states, state.alignment, encoder.mask, encoder.keys)
            alignment = forward_attention_step(tape, scores, state.alignment)
        else:
            alignment = tape.constant(self.hard_alignment(step, encoder))
        context = context_vector(tape, alignment, encoder.states)

        layer_in = tape.concat([query, context])
        layers = []
        previous_out = None
        for index, (h, c) in enumerate(state.layers, start=1):
            keep = masks.zoneout((batch, cfg.decoder_units))
            h, c, _ = lstm_cell(tape, f"decoder.lstm{index}", layer_in, h, c, keep_mask=keep)
            layers.append((h, c))
            out = h if previous_out is None else h + previous_out
            previous_out = out
            layer_in = out

        raw = tape.affine(
            tape.concat([context, query, previous_out]),
            tape.param('decoder.frame_proj.W'), tape.param('decoder.frame_proj.b'),
        )
        gmm = None
        if cfg.output_mode == 'gmm':
            gmm = gmm_partition(tape, raw, cfg.mixtures, cfg.frame_dim)
            frames = gmm_select_mean(tape, gmm)
        else:
            frames = raw
        end_logit = tape.affine(
            tape.concat([context, query]), tape.param('decoder.end_proj.W'), tape.param('decoder.end_proj.b')
        )
        output = DecoderStepOutput(raw, frames, gmm, end_logit, alignment, context, query)
        return output, DecoderState((h_att, c_att), layers, context, alignment)

    # PostNet

    def postnet(self, tape: Tape, y, frame_mask: Optional[np.ndarray], masks: MaskSource) -> Node:
        """
        Residual refinement of (batch, T, d_mel) decoder frames.

        Padded frames are zeroed before every convolution so valid outputs do
        not depend on padding.
        """
        cfg = self.cfg
        y = tape.lift(y)
        if len(y.shape) != 3 or y.shape[-1] != cfg.d_mel:
            raise ShapeError(f"PostNet input must be (batch, T, {cfg.d_mel}), got {y.shape}")
        mask = None
        if frame_mask is not None and not np.all(frame_mask):
            mask = np.asarray(frame_mask, dtype=np.float64)[..., None]

        def masked(node):
            return node if mask is None else node * mask

        source = masked(y)
        bank = []
        for k in range(1, cfg.postnet_bank + 1):
            out = tape.relu(tape.conv1d(source, tape.param(f"postnet.bank{k}.W"), tape.param(f"postnet.bank{k}.b")))
            out = tape.dropout(out, masks.dropout(out.shape, cfg.postnet_dropout), 1.0 - cfg.postnet_dropout)
            bank.append(out)
        hidden = masked(tape.concat(bank, axis=-1))
        hidden = tape.relu(tape.conv1d(hidden, tape.param('postnet.conv1.W'), tape.param('postnet.conv1.b')))
        hidden = tape.dropout(hidden, masks.dropout(hidden.shape, cfg.postnet_dropout), 1.0 - cfg.postnet_dropout)
        residual = tape.conv1d(masked(hidden), tape.param('postnet.conv2.W'), tape.param('postnet.conv2.b'))
        return y + residual

    # Whole-sequence graphs

    def teacher_forced(self, tape: Tape, x: np.ndarray, x_lengths: Sequence[int], y: np.ndarray,
                       frame_mask: np.ndarray, masks: MaskSource) -> ForwardOutput:
        """
        Teacher-forced pass over normalized batch arrays.

        ``y`` is (batch, steps * r, d_mel); step ``t`` is fed the last natural
        frame of step ``t - 1`` (zeros at ``t = 0``).
        """
        cfg = self.cfg
        batch, total, _ = y.shape
        if total % cfg.r:
            raise ShapeError(f"Target length {total} is not a multiple of r={cfg.r}")
        steps = total // cfg.r
        encoder = self.encode(tape, x, x_lengths, masks)
        state = self.initial_state(tape, encoder)
        raws, frames, logits, rows = [], [], [], []
        for t in range(steps):
            prev = np.zeros((batch, cfg.d_mel)) if t == 0 else y[:, t * cfg.r - 1, :]
            out, state = self.decoder_step(tape, prev, t, state, encoder, masks)
            raws.append(out.raw)
            frames.append(out.frames)
            logits.append(out.end_logit)
            rows.append(out.alignment.value)
        decoded = tape.concat(frames, axis=-1).reshape(batch, total, cfg.d_mel)
        post = self.postnet(tape, decoded, frame_mask, masks)
        return ForwardOutput(
            raw=stack_steps(tape, raws),
            frames=decoded,
            post=post,
            end_logits=tape.concat(logits, axis=-1),
            alignment=np.stack(rows, axis=1),
            encoder=encoder,
        )

    def convert(self, x: np.ndarray, end_threshold: float = 0.5, cap_factor: int = 3,
                max_steps: Optional[int] = None, raise_on_cap: bool = False,
                rng: Optional[np.random.Generator] = None) -> ConversionResult:
        """
        Autoregressive conversion of one utterance.

        Args:
            x: raw (un-normalized) encoder input, (T_x, d_in)
            end_threshold: stop once p_end exceeds this value
            cap_factor: step cap is cap_factor * ceil(T_x / r)
            max_steps: explicit step cap overriding cap_factor
            raise_on_cap: raise StepCapExceeded (carrying the result) when the cap is hit

        Returns:
            ConversionResult with frames in the target feature domain
        """
        cfg = self.cfg
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] != cfg.d_in:
            raise ShapeError(f"Conversion input must be (T_x >= 1, {cfg.d_in}), got {x.shape}")
        natural_steps = -(-x.shape[0] // cfg.r)
        cap = max_steps if max_steps is not None else cap_factor * natural_steps
        if cap < 1:
            raise ValueError("The step cap must be at least 1")

        tape = Tape(self.params, record=False)
        masks = MaskSource(cfg, rng or np.random.default_rng(0), training=False)
        encoder = self.encode(tape, self.stats.normalize_input(x)[None], [x.shape[0]], masks)
        state = self.initial_state(tape, encoder)
        prev = np.zeros((1, cfg.d_mel))
        frames, rows, p_end = [], [], []
        finished = False
        step_limit = min(cap, natural_steps) if not cfg.use_attention else cap
        for t in range(step_limit):
            out, state = self.decoder_step(tape, prev, t, state, encoder, masks)
            block = out.frames.value.reshape(cfg.r, cfg.d_mel)
            frames.append(block)
            rows.append(out.alignment.value[0])
            p_end.append(float(out.p_end[0]))
            prev = block[-1:].copy()
            if cfg.use_attention and p_end[-1] > end_threshold:
                finished = True
                break
        if not cfg.use_attention:
            finished = step_limit == natural_steps

        decoded = np.concatenate(frames, axis=0)
        post = self.postnet(tape, decoded[None], None, masks).value[0]
        result = ConversionResult(
            frames=self.stats.denormalize_target(post),
            decoder_frames=self.stats.denormalize_target(decoded),
            normalized=post,
            alignment=np.stack(rows),
            p_end=np.asarray(p_end),
            cap_hit=not finished,
            steps=len(rows),
            encoder_length=encoder.length,
        )
        if result.cap_hit:
            logger.warning(
                "Conversion reached its step cap",
                extra={'event_type': 'step_cap_hit', 'steps': result.steps, 'input_frames': x.shape[0]}
            )
            if raise_on_cap:
                raise StepCapExceeded(f"No end predicted within {result.steps} steps", result)
        return result
