"""
Django settings for scent_project project.

The project has no web surface: Django provides the settings layer, the
management-command CLI (``python manage.py <command>``) and the test runner.

The ``SCENT`` block holds the defaults for every pipeline stage. Config files
passed with ``--config`` override them section by section, and command-line
flags override both (see ``scent.config``).
"""

import os
from pathlib import Path

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = os.environ.get('SCENT_SECRET_KEY', 'scent-local-only-not-a-secret')

DEBUG = os.environ.get('SCENT_DEBUG', '0') == '1'

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'acoustics',
    'scent',
]

DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': BASE_DIR / 'db.sqlite3',
    }
}

TIME_ZONE = 'UTC'

USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# Logging

SCENT_LOG_LEVEL = os.environ.get('SCENT_LOG_LEVEL', 'INFO')

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'structured': {
            'format': '%(asctime)s %(levelname)s %(name)s %(message)s',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'structured',
        },
    },
    'loggers': {
        'scent': {
            'handlers': ['console'],
            'level': SCENT_LOG_LEVEL,
            'propagate': False,
        },
        'acoustics': {
            'handlers': ['console'],
            'level': SCENT_LOG_LEVEL,
            'propagate': False,
        },
    },
}


# Pipeline defaults

SCENT = {
    'dsp': {
        'sample_rate': 16000,
        'fft_size': 1024,
        'win_length_ms': 50.0,
        'hop_ms': 10.0,
        'n_mels': 80,
        'fmin': 0.0,
        'fmax': 8000.0,
        'log_floor': 1e-10,
        'energy': 'power',
    },
    'corpus': {
        'n_train': 200,
        'n_val': 20,
        'n_test': 20,
        'seed': 0,
        'min_frames': 60,
        'max_frames': 240,
        'alphabet_size': 16,
        'min_symbols': 5,
        'max_symbols': 20,
        'min_symbol_frames': 4,
        'max_symbol_frames': 20,
        'warp_ratio': 0.8,
        'warp_jitter': 0.08,
        'aux_upsample': 4,
        'noise_level': 1e-3,
        'workers': 1,
    },
    'model': {
        'd_mel': 80,
        'd_aux': 16,
        'encoder_layers': 2,
        'encoder_units': 256,
        'M': 4,
        'per_layer_factor': 2,
        'prenet_units': 256,
        'attn_units': 256,
        'attn_filters': 10,
        'attn_kernel': 32,
        'attn_v_dim': 256,
        'decoder_layers': 2,
        'decoder_units': 256,
        'postnet_channels': 256,
        'postnet_bank': 8,
        'r': 2,
        'mixtures': 2,
        'output_mode': 'gmm',
        'zoneout_p': 0.2,
        'prenet_dropout': 0.5,
        'postnet_dropout': 0.2,
        'prenet_dropout_at_inference': False,
        'use_location_code': True,
        'use_attention': True,
        'input_features': 'both',
    },
    'train': {
        'lr': 1e-3,
        'decay': 0.95,
        'decay_start': 50,
        'l2': 1e-6,
        'batch': 4,
        'beta1': 0.9,
        'beta2': 0.999,
        'eps': 1e-8,
        'clip_norm': 5.0,
        'seed': 0,
        'epochs': 100,
        'precision': 'float64',
    },
    'loss': {
        'w_dec': None,
        'w_post': 1.0,
        'w_end': 0.005,
    },
    'convert': {
        'end_threshold': 0.5,
        'cap_factor': 3,
        'griffin_lim_iterations': 32,
    },
    'eval': {
        'mcd_coeffs': 25,
        'jump_threshold': 3,
        'griffin_lim_iterations': 32,
    },
    'paths': {
        'corpus': 'data/corpus',
        'runs': 'data/runs',
    },
}
