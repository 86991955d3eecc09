import dataclasses
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from scent.checkpoints import Checkpoint, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from scent.exceptions import DataError
from scent.model import FeatureStats, ScentModel

from .factories import ModelConfigFactory


class CheckpointTest(SimpleTestCase):

    def setUp(self):
        cfg = ModelConfigFactory()
        rng = np.random.default_rng(0)
        stats = FeatureStats(rng.standard_normal(cfg.d_in), rng.uniform(0.5, 2.0, cfg.d_in),
                             rng.standard_normal(cfg.d_mel), rng.uniform(0.5, 2.0, cfg.d_mel))
        self.model = ScentModel(cfg, stats=stats, seed=1)
        self.checkpoint = Checkpoint(
            model_config=cfg.to_dict(),
            params=self.model.params,
            stats=stats,
            train_config={'lr': 0.001},
            epoch=3,
            step=42,
            adam_step=42,
            best_val=1.25,
            adam_m={name: np.full_like(value, 0.5) for name, value in self.model.params.items()},
            adam_v={name: np.full_like(value, 0.25) for name, value in self.model.params.items()},
        )

    def test_rewrite_is_byte_identical(self):
        payload = encode_checkpoint(self.checkpoint)
        self.assertEqual(encode_checkpoint(decode_checkpoint(payload)), payload)

    def test_values_are_stored_in_single_precision(self):
        restored = decode_checkpoint(encode_checkpoint(self.checkpoint))
        self.assertEqual(restored.params.names(), self.model.params.names())
        for name, value in self.model.params.items():
            np.testing.assert_array_equal(restored.params[name], value.astype(np.float32).astype(np.float64))
        np.testing.assert_array_equal(restored.adam_v['decoder.end_proj.b'], [0.25])
        self.assertEqual((restored.epoch, restored.step, restored.adam_step), (3, 42, 42))
        self.assertEqual(restored.best_val, 1.25)

    def test_restored_model_converts_the_same(self):
        x = np.random.default_rng(2).standard_normal((8, 7))
        payload = encode_checkpoint(self.checkpoint)
        first = decode_checkpoint(payload).model().convert(x, end_threshold=1.0, max_steps=3)
        second = decode_checkpoint(payload).model().convert(x, end_threshold=1.0, max_steps=3)
        self.assertEqual(first.frames.tobytes(), second.frames.tobytes())

    def test_corruption_is_detected(self):
        payload = bytearray(encode_checkpoint(self.checkpoint))
        payload[len(payload) // 2] ^= 0xFF
        with self.assertRaisesRegex(DataError, 'checksum'):
            decode_checkpoint(bytes(payload))

    def test_not_a_checkpoint(self):
        with self.assertRaises(DataError):
            decode_checkpoint(b'PK\x03\x04' + bytes(64))

    def test_file_round_trip(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'run' / 'latest.ckpt'
            payload = save_checkpoint(self.checkpoint, path)
            self.assertEqual(path.read_bytes(), payload)
            self.assertFalse(path.with_name('latest.ckpt.tmp').exists())
            restored = load_checkpoint(path)
        self.assertEqual(restored.model_config, self.checkpoint.model_config)

    def test_missing_file(self):
        with self.assertRaises(DataError):
            load_checkpoint('/nonexistent/latest.ckpt')

    def test_invalid_model_config(self):
        for model_config in (dict(self.checkpoint.model_config, bogus=1),
                             dict(self.checkpoint.model_config, output_mode='wave'),
                             ['d_mel', 4]):
            checkpoint = dataclasses.replace(self.checkpoint, model_config=model_config)
            with self.assertRaises(DataError, msg=model_config):
                checkpoint.model()
