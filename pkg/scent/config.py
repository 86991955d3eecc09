"""
Run configuration: ``settings.SCENT`` defaults, INI config files and
command-line flags, merged in that order of increasing precedence and
validated against ``RUN_CONFIG_SCHEMA``.
"""

import configparser
import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Tuple

from django.conf import settings
from jsonschema import ValidationError, validate

from acoustics.dsp import MelConfig
from acoustics.synth import CorpusSpec

from .exceptions import ConfigError
from .metrics import MetricConfig
from .model import ModelConfig
from .train import LossWeights, TrainConfig


logger = logging.getLogger('scent.config')

_INT = {'type': 'integer'}
_POSITIVE_INT = {'type': 'integer', 'minimum': 1}
_COUNT = {'type': 'integer', 'minimum': 0}
_NUMBER = {'type': 'number'}
_POSITIVE = {'type': 'number', 'exclusiveMinimum': 0}
_UNIT = {'type': 'number', 'minimum': 0, 'exclusiveMaximum': 1}
_BOOL = {'type': 'boolean'}


def _section(properties: Dict[str, Any]) -> Dict[str, Any]:
    return {'type': 'object', 'properties': properties, 'additionalProperties': False}


RUN_CONFIG_SCHEMA = {
    'type': 'object',
    'properties': {
        'dsp': _section({
            'sample_rate': _POSITIVE_INT,
            'fft_size': _POSITIVE_INT,
            'win_length_ms': _POSITIVE,
            'hop_ms': _POSITIVE,
            'n_mels': _POSITIVE_INT,
            'fmin': {'type': 'number', 'minimum': 0},
            'fmax': _POSITIVE,
            'log_floor': _POSITIVE,
            'energy': {'enum': ['power', 'magnitude']},
        }),
        'corpus': _section({
            'n_train': _POSITIVE_INT,
            'n_val': _COUNT,
            'n_test': _COUNT,
            'seed': _COUNT,
            'min_frames': _POSITIVE_INT,
            'max_frames': _POSITIVE_INT,
            'alphabet_size': _POSITIVE_INT,
            'min_symbols': _POSITIVE_INT,
            'max_symbols': _POSITIVE_INT,
            'min_symbol_frames': _POSITIVE_INT,
            'max_symbol_frames': _POSITIVE_INT,
            'warp_ratio': {'type': 'number', 'minimum': 0.5, 'maximum': 2.0},
            'warp_jitter': {'type': 'number', 'minimum': 0, 'exclusiveMaximum': 1},
            'aux_upsample': _POSITIVE_INT,
            'noise_level': {'type': 'number', 'minimum': 0},
            'workers': _POSITIVE_INT,
        }),
        'model': _section({
            'd_mel': _POSITIVE_INT,
            'd_aux': _COUNT,
            'encoder_layers': _POSITIVE_INT,
            'encoder_units': _POSITIVE_INT,
            'M': _POSITIVE_INT,
            'per_layer_factor': _POSITIVE_INT,
            'prenet_units': _POSITIVE_INT,
            'attn_units': _POSITIVE_INT,
            'attn_filters': _POSITIVE_INT,
            'attn_kernel': _POSITIVE_INT,
            'attn_v_dim': _POSITIVE_INT,
            'decoder_layers': _POSITIVE_INT,
            'decoder_units': _POSITIVE_INT,
            'postnet_channels': _POSITIVE_INT,
            'postnet_bank': _POSITIVE_INT,
            'r': _POSITIVE_INT,
            'mixtures': _POSITIVE_INT,
            'output_mode': {'enum': ['mse', 'gmm']},
            'zoneout_p': _UNIT,
            'prenet_dropout': _UNIT,
            'postnet_dropout': _UNIT,
            'prenet_dropout_at_inference': _BOOL,
            'use_location_code': _BOOL,
            'use_attention': _BOOL,
            'input_features': {'enum': ['both', 'mel', 'aux']},
        }),
        'train': _section({
            'lr': _POSITIVE,
            'decay': {'type': 'number', 'exclusiveMinimum': 0, 'maximum': 1},
            'decay_start': _COUNT,
            'l2': {'type': 'number', 'minimum': 0},
            'batch': _POSITIVE_INT,
            'beta1': _UNIT,
            'beta2': _UNIT,
            'eps': _POSITIVE,
            'clip_norm': _POSITIVE,
            'seed': _COUNT,
            'epochs': _COUNT,
            'precision': {'enum': ['float64', 'float32']},
        }),
        'loss': _section({
            'w_dec': {'type': ['number', 'null'], 'minimum': 0},
            'w_post': {'type': 'number', 'minimum': 0},
            'w_end': {'type': 'number', 'minimum': 0},
        }),
        'convert': _section({
            'end_threshold': _UNIT,
            'cap_factor': _POSITIVE_INT,
            'griffin_lim_iterations': _COUNT,
        }),
        'eval': _section({
            'mcd_coeffs': {'type': 'integer', 'minimum': 2},
            'jump_threshold': _POSITIVE_INT,
            'griffin_lim_iterations': _COUNT,
        }),
        'paths': _section({
            'corpus': {'type': 'string', 'minLength': 1},
            'runs': {'type': 'string', 'minLength': 1},
        }),
        'run': _section({
            'ablate': {'type': 'array', 'items': {'enum': ['no-att', 'no-locc', 'no-aux', 'no-mel']}},
        }),
    },
    'required': ['dsp', 'corpus', 'model', 'train', 'loss', 'convert', 'eval', 'paths'],
    'additionalProperties': False,
}

ABLATIONS = {
    'no-att': {'use_attention': False},
    'no-locc': {'use_location_code': False},
    'no-aux': {'input_features': 'mel'},
    'no-mel': {'input_features': 'aux'},
}


def parse_mode(value: str) -> Dict[str, Any]:
    """``mse`` or ``gmm:<mixtures>`` (``gmm`` alone keeps the configured count)."""
    value = value.strip().lower()
    if value == 'mse':
        return {'output_mode': 'mse'}
    if value == 'gmm':
        return {'output_mode': 'gmm'}
    if value.startswith('gmm:'):
        try:
            mixtures = int(value[4:])
        except ValueError:
            raise ConfigError(f"Invalid mixture count in mode '{value}'")
        if mixtures < 1:
            raise ConfigError("The mixture count must be at least 1")
        return {'output_mode': 'gmm', 'mixtures': mixtures}
    raise ConfigError(f"Unknown mode '{value}'; use 'mse' or 'gmm:<m>'")


def apply_ablations(model: Dict[str, Any], ablations: Iterable[str]) -> Dict[str, Any]:
    ablations = list(dict.fromkeys(ablations))
    if 'no-aux' in ablations and 'no-mel' in ablations:
        raise ConfigError("no-aux and no-mel together leave the encoder without input")
    model = dict(model)
    for name in ablations:
        if name not in ABLATIONS:
            raise ConfigError(f"Unknown ablation '{name}'; choose from {', '.join(ABLATIONS)}")
        model.update(ABLATIONS[name])
    return model


def _coerce(raw: str) -> Any:
    text = raw.strip()
    lowered = text.lower()
    if lowered in ('true', 'false'):
        return lowered == 'true'
    if lowered in ('none', 'null'):
        return None
    try:
        return json.loads(text)
    except ValueError:
        return text


def read_config_file(path) -> Dict[str, Dict[str, Any]]:
    """Sections of an INI config file with JSON-coerced values."""
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with path.open(encoding='utf-8') as handle:
            parser.read_file(handle)
    except OSError as exc:
        raise ConfigError(f"Cannot read config file {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"Malformed config file {path}: {exc}") from exc
    sections = {}
    for name in parser.sections():
        values = {key: _coerce(value) for key, value in parser[name].items()}
        if name == 'run' and isinstance(values.get('ablate'), str):
            values['ablate'] = [item.strip() for item in values['ablate'].split(',') if item.strip()]
        sections[name] = values
    return sections


def parse_assignment(text: str) -> Tuple[str, str, Any]:
    """``section.key=value`` from ``--set``."""
    target, separator, value = text.partition('=')
    section, dot, key = target.strip().partition('.')
    if not separator or not dot or not section or not key:
        raise ConfigError(f"Expected SECTION.KEY=VALUE, got '{text}'")
    return section, key, _coerce(value)


@dataclass
class RunConfig:
    dsp: MelConfig
    corpus: CorpusSpec
    model: ModelConfig
    train: TrainConfig
    loss: LossWeights
    metrics: MetricConfig
    convert: Dict[str, Any]
    paths: Dict[str, str]
    ablations: List[str] = field(default_factory=list)

    @property
    def corpus_dir(self) -> Path:
        return Path(self.paths['corpus'])

    @property
    def runs_dir(self) -> Path:
        return Path(self.paths['runs'])

    def to_dict(self) -> Dict[str, Any]:
        return {
            'dsp': self.dsp.to_dict(),
            'model': self.model.to_dict(),
            'train': self.train.to_dict(),
            'loss': self.loss.to_dict(),
            'ablations': list(self.ablations),
        }


def load_run_config(config_file=None, overrides: Optional[Mapping[str, Mapping[str, Any]]] = None,
                    ablations: Optional[Iterable[str]] = None) -> RunConfig:
    """
    Merge defaults, the config file and flag overrides, then validate.

    Args:
        config_file: optional INI path
        overrides: ``{section: {key: value}}`` from command-line flags;
            ``None`` values mean "flag not given"
        ablations: flag ablations; they replace the file's ``[run] ablate``

    Raises:
        ConfigError: unknown keys, schema violations or inconsistent values
    """
    merged: Dict[str, Dict[str, Any]] = copy.deepcopy(settings.SCENT)
    layers = [read_config_file(config_file)] if config_file else []
    layers.append({section: {k: v for k, v in values.items() if v is not None}
                   for section, values in (overrides or {}).items()})
    for layer in layers:
        for section, values in layer.items():
            merged.setdefault(section, {}).update(values)

    try:
        validate(instance=merged, schema=RUN_CONFIG_SCHEMA)
    except ValidationError as exc:
        location = '.'.join(str(part) for part in exc.absolute_path) or 'config'
        raise ConfigError(f"Invalid configuration at {location}: {exc.message}") from exc

    chosen = list(ablations) if ablations else list(merged.get('run', {}).get('ablate', []))
    model_values = apply_ablations(merged['model'], chosen)
    loss_values = merged['loss']

    try:
        run = RunConfig(
            dsp=MelConfig(**merged['dsp']).validate(),
            corpus=CorpusSpec(**merged['corpus']).validate(),
            model=ModelConfig(**model_values).validate(),
            train=TrainConfig(**merged['train']).validate(),
            loss=LossWeights.for_mode(
                model_values['output_mode'], loss_values['w_dec'], loss_values['w_post'], loss_values['w_end']
            ),
            metrics=MetricConfig(**merged['eval']).validate(),
            convert=dict(merged['convert']),
            paths=dict(merged['paths']),
            ablations=chosen,
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc

    if run.model.d_mel != run.dsp.n_mels:
        raise ConfigError(f"model.d_mel ({run.model.d_mel}) must equal dsp.n_mels ({run.dsp.n_mels})")
    if run.model.input_features != 'mel' and run.model.d_aux != run.corpus.alphabet_size:
        raise ConfigError(
            f"model.d_aux ({run.model.d_aux}) must equal corpus.alphabet_size ({run.corpus.alphabet_size})"
        )
    logger.debug("Run configuration loaded", extra={'event_type': 'config_loaded', 'config_file': str(config_file)})
    return run


def add_config_arguments(parser) -> None:
    parser.add_argument(
        '--config',
        type=str,
        help='INI config file; its values override the project defaults'
    )
    parser.add_argument(
        '--set',
        action='append',
        default=[],
        metavar='SECTION.KEY=VALUE',
        help='Override a single setting (repeatable; wins over --config)'
    )


def config_from_options(options: Mapping[str, Any],
                        flags: Optional[Mapping[str, Tuple[str, str]]] = None) -> RunConfig:
    """
    Build the run config for a management command.

    ``flags`` maps option names to the ``(section, key)`` they override.
    ``--set`` assignments apply first, dedicated flags after them.
    """
    overrides: Dict[str, Dict[str, Any]] = {}
    for text in options.get('set') or []:
        section, key, value = parse_assignment(text)
        overrides.setdefault(section, {})[key] = value
    for option, (section, key) in (flags or {}).items():
        value = options.get(option)
        if value is not None:
            overrides.setdefault(section, {})[key] = value
    mode = options.get('mode')
    if mode:
        overrides.setdefault('model', {}).update(parse_mode(mode))
    return load_run_config(options.get('config'), overrides, options.get('ablate'))
