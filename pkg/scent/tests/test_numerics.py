import numpy as np
from django.test import SimpleTestCase

from scent.exceptions import NonFiniteError, NumericError, ShapeError, UnknownOpError
from scent.numerics import OPS, ParamStore, Tape, finite_difference_check, forward_backward


def make_store(seed=0, **values):
    """Tuples become standard-normal parameters of that shape; arrays are used as given."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for name, value in values.items():
        store.add(name, rng.standard_normal(value) if isinstance(value, tuple) else value)
    return store


def score(tape, node, seed=7):
    """Scalar loss that weights every output entry differently."""
    return tape.sum(node * np.random.default_rng(seed).standard_normal(node.shape))


def away_from_zero(shape, seed=3):
    rng = np.random.default_rng(seed)
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.2, 1.0, size=shape)


def positive(shape, seed=4):
    return np.random.default_rng(seed).uniform(0.5, 2.0, size=shape)


OP_CASES = {
    'add': ({'a': (3, 4), 'b': (4,)}, lambda t: score(t, t.param('a') + t.param('b'))),
    'sub': ({'a': (3, 4), 'b': (3, 1)}, lambda t: score(t, t.param('a') - t.param('b'))),
    'mul': ({'a': (3, 4), 'b': (4,)}, lambda t: score(t, t.param('a') * t.param('b'))),
    'div': ({'a': (3, 4), 'b': positive((4,))}, lambda t: score(t, t.param('a') / t.param('b'))),
    'neg': ({'a': (3, 4)}, lambda t: score(t, -t.param('a'))),
    'exp': ({'a': (3, 4)}, lambda t: score(t, t.exp(t.param('a')))),
    'log': ({'a': positive((3, 4))}, lambda t: score(t, t.log(t.param('a')))),
    'softplus': ({'a': (3, 4)}, lambda t: score(t, t.softplus(t.param('a')))),
    'sigmoid': ({'a': (3, 4)}, lambda t: score(t, t.sigmoid(t.param('a')))),
    'tanh': ({'a': (3, 4)}, lambda t: score(t, t.tanh(t.param('a')))),
    'relu': ({'a': away_from_zero((3, 4))}, lambda t: score(t, t.relu(t.param('a')))),
    'prelu': (
        {'a': away_from_zero((3, 4)), 'slope': (4,)},
        lambda t: score(t, t.prelu(t.param('a'), t.param('slope'))),
    ),
    'softmax': ({'a': (3, 4)}, lambda t: score(t, t.softmax(t.param('a'), axis=-1))),
    'softmax_axis0': ({'a': (3, 4)}, lambda t: score(t, t.softmax(t.param('a'), axis=0))),
    'logsumexp': ({'a': (3, 4)}, lambda t: score(t, t.logsumexp(t.param('a'), axis=-1))),
    'logsumexp_keepdims': (
        {'a': (3, 4)}, lambda t: score(t, t.logsumexp(t.param('a'), axis=0, keepdims=True)),
    ),
    'sum': ({'a': (3, 4)}, lambda t: score(t, t.sum(t.param('a'), axis=1))),
    'mean': ({'a': (3, 4)}, lambda t: score(t, t.mean(t.param('a'), axis=0))),
    'mean_all': ({'a': (3, 4)}, lambda t: t.mean(t.param('a') * t.param('a'))),
    'matmul': ({'a': (2, 3, 4), 'b': (4, 5)}, lambda t: score(t, t.matmul(t.param('a'), t.param('b')))),
    'matmul_batched': (
        {'a': (2, 3, 4), 'b': (2, 4, 5)}, lambda t: score(t, t.matmul(t.param('a'), t.param('b'))),
    ),
    'affine': (
        {'x': (2, 3, 4), 'W': (4, 5), 'b': (5,)},
        lambda t: score(t, t.affine(t.param('x'), t.param('W'), t.param('b'))),
    ),
    'conv1d': (
        {'x': (2, 6, 3), 'W': (3, 3, 4), 'b': (4,)},
        lambda t: score(t, t.conv1d(t.param('x'), t.param('W'), t.param('b'))),
    ),
    'conv1d_even_kernel': (
        {'x': (6, 3), 'W': (2, 3, 4), 'b': (4,)},
        lambda t: score(t, t.conv1d(t.param('x'), t.param('W'), t.param('b'))),
    ),
    'concat': (
        {'a': (3, 2), 'b': (3, 4)}, lambda t: score(t, t.concat([t.param('a'), t.param('b')], axis=-1)),
    ),
    'concat_axis0': (
        {'a': (2, 4), 'b': (3, 4)}, lambda t: score(t, t.concat([t.param('a'), t.param('b')], axis=0)),
    ),
    'slice': ({'a': (3, 5)}, lambda t: score(t, t.param('a')[:, 1:4])),
    'slice_ellipsis': ({'a': (2, 3, 5)}, lambda t: score(t, t.param('a')[..., 2])),
    'reshape': ({'a': (3, 4)}, lambda t: score(t, t.param('a').reshape(2, 6))),
    'layer_norm': (
        {'x': (3, 5), 'gain': (5,), 'bias': (5,)},
        lambda t: score(t, t.layer_norm(t.param('x'), t.param('gain'), t.param('bias'))),
    ),
    'dropout': (
        {'a': (2, 4)},
        lambda t: score(t, t.dropout(t.param('a'), np.array([[1, 0, 1, 1], [0, 1, 1, 0]]), 0.75)),
    ),
    'zoneout': (
        {'new': (2, 4), 'prev': (2, 4)},
        lambda t: score(t, t.zoneout(t.param('new'), t.param('prev'), np.array([[1, 0, 0, 1], [0, 0, 1, 0]]))),
    ),
}


class ParamStoreTest(SimpleTestCase):

    def test_iteration_is_lexicographic(self):
        store = ParamStore()
        for name in ('decoder.b', 'attention.W', 'encoder.layer0.fw.W'):
            store.add(name, np.zeros(2))
        self.assertEqual(store.names(), ['attention.W', 'decoder.b', 'encoder.layer0.fw.W'])
        self.assertEqual([name for name, _ in store.items()], store.names())

    def test_duplicate_names_are_rejected(self):
        store = ParamStore()
        store.add('w', np.zeros(2))
        with self.assertRaises(ValueError):
            store.add('w', np.zeros(2))

    def test_shapes_are_enforced(self):
        store = ParamStore()
        store.add('w', np.zeros((2, 3)))
        self.assertEqual(store.grad('w').shape, (2, 3))
        with self.assertRaises(ShapeError):
            store.set('w', np.zeros(6))
        with self.assertRaises(ShapeError):
            store.accumulate('w', np.zeros((3, 2)))

    def test_zero_grad_and_norm(self):
        store = ParamStore()
        store.add('w', np.zeros(2))
        store.accumulate('w', np.array([3.0, 4.0]))
        self.assertAlmostEqual(store.global_norm(), 5.0)
        store.zero_grad()
        self.assertEqual(store.global_norm(), 0.0)


class ForwardBackwardTest(SimpleTestCase):

    def test_sigmoid_at_zero(self):
        outputs, grads = forward_backward(lambda tape, x: tape.sigmoid(x), {'x': np.array(0.0)}, ParamStore())
        self.assertEqual(float(outputs['loss']), 0.5)
        self.assertEqual(float(grads['x']), 0.25)

    def test_constant_graph_has_zero_gradient(self):
        def graph(tape, x):
            return tape.sum(tape.constant(np.ones(3)) * 2.0)

        outputs, grads = forward_backward(graph, {'x': np.array([1.0, 2.0])}, ParamStore())
        self.assertEqual(float(outputs['loss']), 6.0)
        np.testing.assert_array_equal(grads['x'], np.zeros(2))

    def test_matrix_product_sum(self):
        store = make_store(a=(3, 4), b=(4, 2))

        def graph(tape):
            return tape.sum(tape.matmul(tape.param('a'), tape.param('b')))

        report = finite_difference_check(graph, store, step=1e-5, tolerance=1e-6)
        self.assertTrue(report.passed, report.checks)

        store.zero_grad()
        forward_backward(graph, None, store)
        np.testing.assert_allclose(store.grad('a'), np.tile(store['b'].sum(axis=1), (3, 1)), atol=1e-12)

    def test_linear_graph_is_exact(self):
        store = make_store(a=(3,))
        report = finite_difference_check(
            lambda tape, x: tape.sum(tape.param('a') * x),
            store,
            inputs={'x': np.array([0.5, -1.5, 2.0])},
            check_inputs=True,
            tolerance=1e-9,
        )
        self.assertTrue(report.passed, report.checks)
        self.assertIn('input:x', report.checks)

    def test_layer_normalized_affine(self):
        store = make_store(W=(4, 5), b=(5,), gain=(5,), bias=(5,))
        x = np.random.default_rng(11).standard_normal((3, 4))

        def graph(tape, x):
            hidden = tape.affine(x, tape.param('W'), tape.param('b'))
            return score(tape, tape.tanh(tape.layer_norm(hidden, tape.param('gain'), tape.param('bias'))))

        report = finite_difference_check(graph, store, inputs={'x': x}, check_inputs=True, tolerance=1e-5)
        self.assertTrue(report.passed, report.checks)

    def test_every_op_matches_finite_differences(self):
        covered = set()
        for label, (values, graph) in OP_CASES.items():
            with self.subTest(op=label):
                store = make_store(**values)
                tape = Tape(store)
                graph(tape)
                covered.update(node.op for node in tape._nodes)
                report = finite_difference_check(lambda t: graph(t), store, step=1e-5, tolerance=1e-4)
                self.assertTrue(report.passed, f"{label}: {report.checks}")
        self.assertEqual(covered, set(OPS))

    def test_identical_runs_are_bit_identical(self):
        values, graph = OP_CASES['layer_norm']
        first = make_store(seed=5, **values)
        second = make_store(seed=5, **values)
        out_first, _ = forward_backward(lambda t: graph(t), None, first)
        out_second, _ = forward_backward(lambda t: graph(t), None, second)
        self.assertEqual(out_first['loss'].tobytes(), out_second['loss'].tobytes())
        for name in first.names():
            self.assertEqual(first.grad(name).tobytes(), second.grad(name).tobytes())

    def test_designated_inputs_receive_gradients(self):
        store = make_store(W=(3, 2), b=(2,))

        def graph(tape, x):
            return tape.sum(tape.affine(x, tape.param('W'), tape.param('b')))

        _, grads = forward_backward(graph, {'x': np.ones((4, 3))}, store)
        np.testing.assert_allclose(grads['x'], np.tile(store['W'].sum(axis=1), (4, 1)))

    def test_dict_results_use_the_loss_key(self):
        store = make_store(a=(2,))

        def graph(tape):
            a = tape.param('a')
            return {'loss': tape.sum(a * a), 'aux': tape.sum(a)}

        outputs, _ = forward_backward(graph, None, store)
        self.assertEqual(set(outputs), {'loss', 'aux'})
        np.testing.assert_allclose(store.grad('a'), 2.0 * store['a'])


class OpPropertyTest(SimpleTestCase):

    def test_softmax_rows_are_distributions(self):
        tape = Tape()
        logits = np.random.default_rng(0).standard_normal((50, 7)) * 30.0
        probs = tape.softmax(tape.constant(logits)).value
        self.assertTrue(np.all(probs >= 0.0))
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-9)

    def test_layer_norm_statistics(self):
        tape = Tape()
        x = np.random.default_rng(1).standard_normal((20, 16)) * 3.0 + 5.0
        out = tape.layer_norm(tape.constant(x), np.ones(16), np.zeros(16)).value
        self.assertLess(np.max(np.abs(out.mean(axis=-1))), 1e-6)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-5)

    def test_conv1d_keeps_length(self):
        tape = Tape()
        for kernel in (1, 2, 3, 8):
            out = tape.conv1d(tape.constant(np.ones((2, 5, 3))), np.ones((kernel, 3, 4)), np.zeros(4))
            self.assertEqual(out.shape, (2, 5, 4))

    def test_masks_of_none_skip_the_op(self):
        tape = Tape()
        node = tape.constant(np.ones(3))
        self.assertIs(tape.dropout(node, None, 0.5), node)
        self.assertIs(tape.zoneout(node, tape.constant(np.zeros(3)), None), node)

    def test_numpy_operands_on_the_left(self):
        tape = Tape()
        node = tape.constant(np.array([1.0, 2.0]))
        np.testing.assert_array_equal((np.array([3.0, 3.0]) - node).value, [2.0, 1.0])
        np.testing.assert_array_equal((2.0 * node).value, [2.0, 4.0])


class NumericErrorTest(SimpleTestCase):

    def test_unknown_op(self):
        with self.assertRaises(UnknownOpError):
            Tape().apply('conv2d', np.ones(3))

    def test_shape_mismatch(self):
        tape = Tape()
        with self.assertRaises(ShapeError):
            tape.affine(np.ones((2, 3)), np.ones((4, 5)), np.zeros(5))
        with self.assertRaises(ShapeError):
            tape.constant(np.ones(3)) + tape.constant(np.ones(4))
        with self.assertRaises(ShapeError):
            tape.matmul(np.ones(3), np.ones((3, 2)))

    def test_non_finite_intermediate(self):
        tape = Tape()
        with self.assertRaises(NonFiniteError):
            tape.log(tape.constant(np.array([-1.0])))
        with self.assertRaises(NonFiniteError):
            tape.exp(tape.constant(np.array([1000.0])))

    def test_loss_must_be_scalar(self):
        store = make_store(a=(3,))
        tape = Tape(store)
        with self.assertRaises(ShapeError):
            tape.backward(tape.param('a') * 2.0)

    def test_finite_differences_need_float64(self):
        store = ParamStore(np.float32)
        store.add('a', np.ones(2))
        with self.assertRaises(NumericError):
            finite_difference_check(lambda t: t.sum(t.param('a')), store)

    def test_numeric_errors_carry_exit_code(self):
        self.assertEqual(NonFiniteError.exit_code, 4)
        self.assertEqual(ShapeError.exit_code, 4)
