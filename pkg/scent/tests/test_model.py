import math

import numpy as np
from django.test import SimpleTestCase

from scent.exceptions import ConfigError, ShapeError, StepCapExceeded
from scent.model import (
    FeatureStats, GmmParams, MaskSource, ScentModel, gmm_nll, gmm_partition, gmm_select_mean, init_params,
    location_code, location_codes, model_inputs, pad_to_multiple, parameter_shapes,
)
from scent.numerics import ParamStore, Tape, finite_difference_check, forward_backward

from .factories import ModelConfigFactory


def zero_params(model, prefixes):
    for name in model.params.names():
        if name.startswith(prefixes):
            model.params.set(name, np.zeros_like(model.params[name]))


class LocationCodeTest(SimpleTestCase):

    def test_position_zero(self):
        np.testing.assert_array_equal(location_code(0, 6), [0, 1, 0, 1, 0, 1])

    def test_hand_values(self):
        np.testing.assert_allclose(
            location_code(1, 4), [math.sin(1), math.cos(1), math.sin(0.01), math.cos(0.01)], atol=1e-15
        )
        np.testing.assert_allclose(location_code(1, 4), [0.84147, 0.54030, 0.01000, 0.99995], atol=1e-5)

    def test_entries_are_bounded(self):
        codes = location_codes(1000, 16, offset=10 ** 6 - 999)
        self.assertTrue(np.all(np.abs(codes) <= 1.0))
        self.assertTrue(np.all(np.abs(location_code(10 ** 6, 8)) <= 1.0))

    def test_odd_dimension(self):
        with self.assertRaises(ShapeError):
            location_code(3, 5)


class ModelConfigTest(SimpleTestCase):

    def test_overall_ratio_must_match_layers(self):
        with self.assertRaises(ConfigError):
            ModelConfigFactory(M=2).validate()
        ModelConfigFactory(M=2, encoder_layers=1).validate()

    def test_output_widths(self):
        self.assertEqual(ModelConfigFactory(output_mode='gmm', mixtures=2).output_dim, (2 * 8 + 1) * 2)
        self.assertEqual(ModelConfigFactory(output_mode='mse').output_dim, 8)
        self.assertEqual(ModelConfigFactory(input_features='mel').d_in, 4)
        self.assertEqual(ModelConfigFactory(input_features='aux').d_in, 3)

    def test_attention_parameters_follow_the_flag(self):
        with_attention = parameter_shapes(ModelConfigFactory())
        without = parameter_shapes(ModelConfigFactory(use_attention=False))
        self.assertIn('attention.F', with_attention)
        self.assertFalse(any(name.startswith('attention.') for name in without))

    def test_initialization_is_seeded(self):
        cfg = ModelConfigFactory()
        first, second = init_params(cfg, seed=3), init_params(cfg, seed=3)
        for name in first.names():
            np.testing.assert_array_equal(first[name], second[name])
        self.assertFalse(np.array_equal(first['attention.W'], init_params(cfg, seed=4)['attention.W']))


class InputTest(SimpleTestCase):

    def test_model_inputs_select_channels(self):
        mel, aux = np.ones((5, 4)), np.zeros((5, 3))
        self.assertEqual(model_inputs(mel, aux, ModelConfigFactory()).shape, (5, 7))
        self.assertEqual(model_inputs(mel, None, ModelConfigFactory(input_features='mel')).shape, (5, 4))
        np.testing.assert_array_equal(model_inputs(mel, aux, ModelConfigFactory(input_features='aux')), aux)
        with self.assertRaises(ShapeError):
            model_inputs(mel, np.zeros((4, 3)), ModelConfigFactory())

    def test_padding_repeats_the_last_frame(self):
        x = np.arange(2 * 5 * 1, dtype=float).reshape(2, 5, 1)
        padded = pad_to_multiple(x, [5, 3], 4)
        self.assertEqual(padded.shape, (2, 8, 1))
        np.testing.assert_array_equal(padded[0, 5:, 0], [4, 4, 4])
        np.testing.assert_array_equal(padded[1, 3:, 0], [7, 7, 7, 7, 7])

    def test_feature_stats_round_trip(self):
        rng = np.random.default_rng(0)
        stats = FeatureStats.from_sequences([rng.standard_normal((6, 7))], [rng.standard_normal((5, 4)) * 3.0 + 1.0])
        y = rng.standard_normal((3, 4))
        np.testing.assert_allclose(stats.denormalize_target(stats.normalize_target(y)), y, atol=1e-12)
        restored = FeatureStats.from_arrays(stats.to_arrays())
        np.testing.assert_array_equal(restored.target_std, stats.target_std)

    def test_masks_only_during_training(self):
        cfg = ModelConfigFactory(zoneout_p=0.2, prenet_dropout=0.5)
        idle = MaskSource(cfg, np.random.default_rng(0), training=False)
        self.assertIsNone(idle.zoneout((2, 3)))
        self.assertIsNone(idle.dropout((2, 3), 0.5))
        busy = MaskSource(cfg, np.random.default_rng(0), training=True)
        mask = busy.dropout((50, 40), 0.5)
        self.assertTrue(set(np.unique(mask)) <= {0.0, 1.0})
        self.assertTrue(0.3 < mask.mean() < 0.7)


class EncoderTest(SimpleTestCase):

    def setUp(self):
        self.model = ScentModel(ModelConfigFactory(), seed=0)

    def encode(self, frames, x=None):
        cfg = self.model.cfg
        if x is None:
            x = np.random.default_rng(frames).standard_normal((1, frames, cfg.d_in))
        masks = MaskSource(cfg)
        return self.model.encode(Tape(self.model.params, record=False), x, [frames], masks)

    def test_length_law(self):
        for frames in range(1, 101):
            encoder = self.encode(frames)
            self.assertEqual(encoder.length, math.ceil(frames / 4), frames)
            self.assertEqual(int(encoder.lengths[0]), encoder.length)

    def test_hand_lengths(self):
        self.assertEqual(self.encode(8).length, 2)
        self.assertEqual(self.encode(9).length, 3)

    def test_zero_model_yields_bare_location_codes(self):
        zero_params(self.model, ('encoder.',))
        encoder = self.encode(9, x=np.zeros((1, 9, self.model.cfg.d_in)))
        np.testing.assert_allclose(encoder.states.value[0], location_codes(3, self.model.cfg.d_enc), atol=1e-15)

    def test_batch_padding_does_not_change_states(self):
        rng = np.random.default_rng(7)
        short = rng.standard_normal((1, 5, self.model.cfg.d_in))
        batch = np.concatenate([np.concatenate([short, np.zeros((1, 7, 7))], axis=1),
                                rng.standard_normal((1, 12, 7))])
        tape = Tape(self.model.params, record=False)
        batched = self.model.encode(tape, batch, [5, 12], MaskSource(self.model.cfg))
        alone = self.encode(5, x=short)
        np.testing.assert_allclose(batched.states.value[0, :2], alone.states.value[0], atol=1e-12)
        np.testing.assert_array_equal(batched.mask[0], [1, 1, 0])


class GmmTest(SimpleTestCase):

    def partition(self, o, mixtures=2, dim=3):
        return gmm_partition(Tape(), np.asarray(o, dtype=float), mixtures, dim)

    def test_zero_output(self):
        gmm = self.partition(np.zeros(14))
        np.testing.assert_allclose(gmm.weights.value, [0.5, 0.5])
        np.testing.assert_allclose(gmm.sigma.value, np.full((2, 3), math.log(2.0)), atol=1e-15)
        np.testing.assert_array_equal(gmm.mean.value, np.zeros((2, 3)))

    def test_weight_logits(self):
        o = np.zeros(14)
        o[0] = math.log(3.0)
        np.testing.assert_allclose(self.partition(o).weights.value, [0.75, 0.25], atol=1e-12)

    def test_deviation_floor(self):
        o = np.zeros(14)
        o[2:8] = -100.0
        self.assertTrue(np.all(self.partition(o).sigma.value > 0.0))

    def test_wrong_length(self):
        with self.assertRaises(ShapeError):
            self.partition(np.zeros(13))

    def test_random_outputs_are_valid_mixtures(self):
        o = np.random.default_rng(0).standard_normal((1000, 14)) * 10.0
        gmm = self.partition(o)
        np.testing.assert_allclose(gmm.weights.value.sum(axis=-1), 1.0, atol=1e-6)
        self.assertTrue(np.all(gmm.sigma.value > 0.0))

    def select(self, logits, mixtures=2):
        o = np.concatenate([np.asarray(logits, dtype=float), np.zeros(3 * mixtures),
                            np.arange(1.0, 3 * mixtures + 1)])
        return gmm_select_mean(Tape(), self.partition(o, mixtures)).value

    def test_select_heaviest(self):
        np.testing.assert_array_equal(self.select([math.log(0.3), math.log(0.7)]), [4, 5, 6])

    def test_select_tie_takes_first(self):
        np.testing.assert_array_equal(self.select([0.0, 0.0]), [1, 2, 3])

    def test_select_single_component(self):
        np.testing.assert_array_equal(self.select([0.0], mixtures=1), [1, 2, 3])

    def test_selection_gradient_reaches_only_the_chosen_mean(self):
        o = np.zeros(14)
        o[1] = 1.0

        def graph(tape, o):
            return tape.sum(gmm_select_mean(tape, gmm_partition(tape, o, 2, 3)))

        _, grads = forward_backward(graph, {'o': o}, ParamStore())
        expected = np.zeros(14)
        expected[11:] = 1.0
        np.testing.assert_array_equal(grads['o'], expected)

    def test_hand_likelihood(self):
        tape = Tape()
        log_weights = np.log(np.array([0.5, 0.5]))
        gmm = GmmParams(
            log_weights=tape.constant(log_weights),
            weights=tape.constant(np.exp(log_weights)),
            sigma=tape.constant(np.ones((2, 1))),
            mean=tape.constant(np.array([[0.0], [2.0]])),
        )
        phi = lambda z: math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)  # noqa: E731
        value = float(gmm_nll(tape, gmm, np.array([0.0])).value)
        self.assertAlmostEqual(value, -math.log(0.5 * phi(0.0) + 0.5 * phi(2.0)), places=12)
        self.assertAlmostEqual(value, 1.48516, places=5)

    def test_single_unit_gaussian_reduces_to_squared_error(self):
        rng = np.random.default_rng(2)
        count, dim = 6, 8
        y = rng.standard_normal((count, dim))
        store = ParamStore()
        store.add('mu', rng.standard_normal((count, dim)))
        constant = 0.5 * dim * math.log(2.0 * math.pi)

        def nll(tape):
            gmm = GmmParams(
                log_weights=tape.constant(np.zeros((count, 1))),
                weights=tape.constant(np.ones((count, 1))),
                sigma=tape.constant(np.ones((count, 1, dim))),
                mean=tape.param('mu').reshape(count, 1, dim),
            )
            return tape.sum(gmm_nll(tape, gmm, y))

        def squared_error(tape):
            diff = tape.param('mu') - y
            return 0.5 * tape.sum(diff * diff)

        nll_value, _ = forward_backward(nll, None, store)
        nll_grad = store.grad('mu').copy()
        store.zero_grad()
        mse_value, _ = forward_backward(squared_error, None, store)
        self.assertAlmostEqual(float(nll_value['loss']) - count * constant, float(mse_value['loss']), delta=1e-10)
        np.testing.assert_allclose(nll_grad, store.grad('mu'), atol=1e-9)


class DecoderTest(SimpleTestCase):

    def encoder_and_state(self, model, tape, frames=12, seed=0):
        x = np.random.default_rng(seed).standard_normal((1, frames, model.cfg.d_in))
        masks = MaskSource(model.cfg)
        encoder = model.encode(tape, x, [frames], masks)
        return encoder, model.initial_state(tape, encoder), masks

    def test_zero_projections_give_zero_frames_and_even_odds(self):
        model = ScentModel(ModelConfigFactory(output_mode='mse'), seed=1)
        zero_params(model, ('decoder.frame_proj.', 'decoder.end_proj.'))
        tape = Tape(model.params, record=False)
        encoder, state, masks = self.encoder_and_state(model, tape)
        out, _ = model.decoder_step(tape, np.ones((1, 4)), 0, state, encoder, masks)
        np.testing.assert_array_equal(out.frames.value, np.zeros((1, 8)))
        np.testing.assert_array_equal(out.p_end, [0.5])

    def test_step_outputs(self):
        model = ScentModel(ModelConfigFactory(), seed=2)
        tape = Tape(model.params, record=False)
        encoder, state, masks = self.encoder_and_state(model, tape)
        out, state = model.decoder_step(tape, np.zeros((1, 4)), 0, state, encoder, masks)
        self.assertEqual(out.frames.shape, (1, 8))
        self.assertEqual(out.alignment.shape, (1, 3))
        np.testing.assert_allclose(out.alignment.value.sum(), 1.0, atol=1e-12)
        np.testing.assert_allclose(out.gmm.weights.value.sum(), 1.0, atol=1e-12)
        self.assertTrue(0.0 < out.p_end[0] < 1.0)

    def test_step_gradient_matches_finite_differences(self):
        cfg = ModelConfigFactory(prenet_units=8, attn_units=8, decoder_units=8, encoder_units=4, mixtures=2)
        model = ScentModel(cfg, seed=3)
        rng = np.random.default_rng(4)
        x = rng.standard_normal((1, 12, cfg.d_in))
        prev = rng.standard_normal((1, cfg.d_mel))
        target = rng.standard_normal((1, cfg.frame_dim))

        def graph(tape):
            masks = MaskSource(cfg)
            encoder = model.encode(tape, x, [12], masks)
            state = model.initial_state(tape, encoder)
            first, state = model.decoder_step(tape, np.zeros((1, cfg.d_mel)), 0, state, encoder, masks)
            second, _ = model.decoder_step(tape, prev, 1, state, encoder, masks)
            nll = tape.sum(gmm_nll(tape, first.gmm, target)) + tape.sum(gmm_nll(tape, second.gmm, target))
            end = tape.sum(tape.softplus(first.end_logit)) + tape.sum(tape.softplus(-second.end_logit))
            return 0.01 * nll + 0.01 * end

        report = finite_difference_check(graph, model.params, step=1e-5, tolerance=1e-4, max_entries=6)
        self.assertTrue(report.passed, report.failures())


class PostNetTest(SimpleTestCase):

    def setUp(self):
        self.model = ScentModel(ModelConfigFactory(), seed=5)
        self.masks = MaskSource(self.model.cfg)

    def test_zero_weights_are_the_identity(self):
        zero_params(self.model, ('postnet.',))
        y = np.random.default_rng(0).standard_normal((1, 9, 4))
        out = self.model.postnet(Tape(self.model.params), y, None, self.masks).value
        np.testing.assert_array_equal(out, y)

    def test_length_is_kept(self):
        for frames in (1, 7, 64):
            y = np.random.default_rng(frames).standard_normal((1, frames, 4))
            out = self.model.postnet(Tape(self.model.params), y, None, self.masks)
            self.assertEqual(out.shape, (1, frames, 4))

    def test_gradient_matches_finite_differences(self):
        y = np.random.default_rng(1).standard_normal((1, 6, 4))
        weights = np.random.default_rng(2).standard_normal((1, 6, 4))

        def graph(tape, y):
            return tape.sum(self.model.postnet(tape, y, None, self.masks) * weights)

        report = finite_difference_check(
            graph, self.model.params, inputs={'y': y}, check_inputs=True, max_entries=12
        )
        self.assertTrue(report.passed, report.failures())

    def test_padded_frames_do_not_leak(self):
        rng = np.random.default_rng(3)
        y = rng.standard_normal((1, 8, 4))
        noisy = y.copy()
        noisy[0, 5:] = rng.standard_normal((3, 4)) * 100.0
        mask = np.array([[1, 1, 1, 1, 1, 0, 0, 0]], dtype=float)
        clean = self.model.postnet(Tape(self.model.params), y, mask, self.masks).value
        dirty = self.model.postnet(Tape(self.model.params), noisy, mask, self.masks).value
        np.testing.assert_allclose(clean[0, :5], dirty[0, :5], atol=1e-12)


class ConvertTest(SimpleTestCase):

    def setUp(self):
        self.model = ScentModel(ModelConfigFactory(), seed=6)
        self.x = np.random.default_rng(0).standard_normal((10, 7))

    def test_step_cap_of_one(self):
        result = self.model.convert(self.x, end_threshold=1.0, max_steps=1)
        self.assertEqual(result.frames.shape, (2, 4))
        self.assertTrue(result.cap_hit)
        self.assertEqual(result.steps, 1)

    def test_cap_can_raise_with_the_partial_result(self):
        with self.assertRaises(StepCapExceeded) as caught:
            self.model.convert(self.x, end_threshold=1.0, max_steps=3, raise_on_cap=True)
        self.assertEqual(caught.exception.result.steps, 3)
        self.assertEqual(caught.exception.exit_code, 5)

    def test_alignment_rows_and_support(self):
        result = self.model.convert(self.x, end_threshold=1.0, cap_factor=2)
        self.assertEqual(result.steps, 10)
        self.assertEqual(result.alignment.shape, (10, 3))
        np.testing.assert_allclose(result.alignment.sum(axis=1), 1.0, atol=1e-6)
        previous = np.array([1.0, 0.0, 0.0])
        for row in result.alignment:
            self.assertTrue(np.all(row[np.flatnonzero(previous).max() + 2:] == 0.0))
            previous = row

    def test_end_threshold_stops_early(self):
        zero_params(self.model, ('decoder.end_proj.',))
        self.model.params.set('decoder.end_proj.b', np.array([5.0]))
        result = self.model.convert(self.x, end_threshold=0.5)
        self.assertEqual(result.steps, 1)
        self.assertFalse(result.cap_hit)

    def test_conversion_is_deterministic(self):
        first = self.model.convert(self.x, end_threshold=1.0, max_steps=4)
        second = self.model.convert(self.x, end_threshold=1.0, max_steps=4)
        self.assertEqual(first.frames.tobytes(), second.frames.tobytes())

    def test_without_attention_the_output_follows_the_input(self):
        model = ScentModel(ModelConfigFactory(use_attention=False), seed=6)
        result = model.convert(self.x)
        self.assertEqual(result.steps, 5)
        self.assertFalse(result.cap_hit)
        np.testing.assert_array_equal(np.argmax(result.alignment, axis=1), [0, 0, 1, 1, 2])

    def test_input_shape_is_checked(self):
        with self.assertRaises(ShapeError):
            self.model.convert(np.zeros((10, 3)))
