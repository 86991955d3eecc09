import itertools
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from acoustics.features import Manifest, ManifestEntry
from acoustics.synth import build_corpus
from acoustics.tests.factories import CorpusSpecFactory, MelConfigFactory
from scent.align import (
    DtwPath, downsample_path, duration_ratio, dtw, export_path, interpolate_source, path_cost, target_to_source,
    warp_to_target,
)
from scent.exceptions import DataError


def monotone_paths(rows, cols):
    """Every path from (0, 0) to (rows - 1, cols - 1) with steps (1, 0), (0, 1), (1, 1)."""
    def extend(path):
        i, j = path[-1]
        if (i, j) == (rows - 1, cols - 1):
            yield list(path)
            return
        for di, dj in ((1, 1), (0, 1), (1, 0)):
            if i + di < rows and j + dj < cols:
                path.append((i + di, j + dj))
                yield from extend(path)
                path.pop()
    yield from extend([(0, 0)])


class DtwTest(SimpleTestCase):

    def test_matches_exhaustive_search(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            a = rng.standard_normal((int(rng.integers(1, 6)), 2))
            b = rng.standard_normal((int(rng.integers(1, 6)), 2))
            best = min(path_cost(a, b, np.array(path)) for path in monotone_paths(len(a), len(b)))
            result = dtw(a, b)
            self.assertAlmostEqual(result.cost, best, delta=1e-10)
            self.assertAlmostEqual(path_cost(a, b, result.pairs), result.cost, delta=1e-10)

    def test_path_is_monotone_and_complete(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((9, 3)), rng.standard_normal((6, 3))
        path = dtw(a, b)
        self.assertEqual(tuple(path.pairs[0]), (0, 0))
        self.assertEqual(tuple(path.pairs[-1]), (8, 5))
        steps = {tuple(step) for step in np.diff(path.pairs, axis=0)}
        self.assertTrue(steps <= {(1, 1), (0, 1), (1, 0)})
        self.assertTrue(max(len(a), len(b)) <= len(path) <= len(a) + len(b) - 1)

    def test_cost_is_symmetric(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            a = rng.standard_normal((int(rng.integers(1, 12)), 4))
            b = rng.standard_normal((int(rng.integers(1, 12)), 4))
            self.assertAlmostEqual(dtw(a, b).cost, dtw(b, a).cost, delta=1e-10)

    def test_single_source_frame(self):
        path = dtw(np.array([0.0]), np.array([0.0, 0.0, 0.0]))
        np.testing.assert_array_equal(path.pairs, [[0, 0], [0, 1], [0, 2]])
        self.assertEqual(path.cost, 0.0)

    def test_identical_sequences_align_diagonally(self):
        a = np.random.default_rng(3).standard_normal((7, 2))
        path = dtw(a, a)
        np.testing.assert_array_equal(path.pairs, np.stack([np.arange(7)] * 2, axis=1))
        self.assertEqual(path.cost, 0.0)

    def test_empty_sequence(self):
        with self.assertRaises(DataError):
            dtw(np.zeros((0, 2)), np.zeros((3, 2)))


class WarpTest(SimpleTestCase):

    def test_identity_path(self):
        a = np.random.default_rng(4).standard_normal((5, 3))
        np.testing.assert_array_equal(warp_to_target(a, dtw(a, a)), a)

    def test_ties_are_averaged(self):
        a = np.array([[1.0], [3.0], [5.0], [8.0]])
        path = DtwPath(np.array([[0, 0], [1, 0], [2, 1], [3, 1], [3, 2]]), 0.0)
        np.testing.assert_array_equal(warp_to_target(a, path), [[2.0], [6.5], [8.0]])

    def test_warped_source_is_closer(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            b = rng.standard_normal((int(rng.integers(4, 15)), 3))
            a = np.repeat(b, rng.integers(1, 3, size=len(b)), axis=0) + 0.05 * rng.standard_normal((1, 3))
            path = dtw(a, b)
            warped = warp_to_target(a, path)
            self.assertEqual(warped.shape, b.shape)
            self.assertLessEqual(dtw(warped, b).cost, path.cost + 1e-9)

    def test_path_must_span_both_sequences(self):
        a = np.zeros((3, 1))
        with self.assertRaises(DataError):
            warp_to_target(a, DtwPath(np.array([[0, 0], [1, 1]]), 0.0))
        with self.assertRaises(DataError):
            warp_to_target(a, DtwPath(np.array([[0, 0], [1, 1], [2, 2]]), 0.0), target_length=5)


class InterpolationTest(SimpleTestCase):

    def test_unit_ratio_is_identity(self):
        a = np.random.default_rng(6).standard_normal((6, 2))
        np.testing.assert_allclose(interpolate_source(a, 1.0), a, atol=1e-15)

    def test_doubling(self):
        out = interpolate_source(np.array([[0.0], [2.0], [4.0]]), 2.0)
        self.assertEqual(out.shape, (6, 1))
        np.testing.assert_allclose(out[:, 0], [0.0, 0.8, 1.6, 2.4, 3.2, 4.0], atol=1e-12)

    def test_constant_stays_constant(self):
        out = interpolate_source(np.full((7, 3), 2.5), 0.6)
        self.assertEqual(out.shape, (4, 3))
        np.testing.assert_allclose(out, 2.5, atol=1e-15)

    def test_values_stay_within_bounds(self):
        a = np.random.default_rng(7).standard_normal((11, 2))
        for ratio in (0.3, 0.77, 1.4, 3.0):
            out = interpolate_source(a, ratio)
            self.assertEqual(out.shape[0], int(round(ratio * 11)))
            self.assertTrue(np.all(out >= a.min(axis=0) - 1e-12))
            self.assertTrue(np.all(out <= a.max(axis=0) + 1e-12))
            np.testing.assert_allclose(out[[0, -1]], a[[0, -1]], atol=1e-12)

    def test_invalid_ratio(self):
        with self.assertRaises(DataError):
            interpolate_source(np.zeros((4, 1)), 0.0)
        with self.assertRaises(DataError):
            interpolate_source(np.zeros((1, 1)), 0.2)


class PathExportTest(SimpleTestCase):

    def setUp(self):
        self.path = DtwPath(np.array([[0, 0], [1, 0], [1, 1], [2, 2], [3, 2], [4, 3], [5, 4]]), 0.0)

    def test_target_to_source_takes_the_first_pairing(self):
        np.testing.assert_array_equal(target_to_source(self.path), [0, 1, 2, 4, 5])

    def test_downsampled_points(self):
        points = downsample_path(self.path, M=2, r=2)
        np.testing.assert_array_equal(points, [[0, 0], [1, 1], [2, 2]])

    def test_step_count_is_clipped_to_the_path(self):
        points = downsample_path(self.path, M=4, r=2, n_steps=5)
        np.testing.assert_array_equal(points[:, 0], np.arange(5))
        np.testing.assert_array_equal(points[:, 1], [0, 0, 1, 1, 1])

    def test_export(self):
        with tempfile.TemporaryDirectory() as tmp:
            destination = Path(tmp) / 'paths' / 'u.tsv'
            export_path(downsample_path(self.path, 2, 2), destination)
            lines = destination.read_text().splitlines()
        self.assertEqual(lines[0], '# x\ty')
        self.assertEqual(lines[1:], ['0\t0', '1\t1', '2\t2'])

    def test_exhaustive_helper_counts(self):
        # Delannoy numbers
        self.assertEqual([sum(1 for _ in monotone_paths(n, n)) for n in range(1, 5)], [1, 3, 13, 63])
        self.assertEqual(len(list(itertools.islice(monotone_paths(2, 3), 10))), 5)


class DurationRatioTest(SimpleTestCase):

    def manifest(self, source_durations, target_durations):
        entries = []
        for index, (source, target) in enumerate(zip(source_durations, target_durations)):
            for role, seconds in (('source', source), ('target', target)):
                entries.append(ManifestEntry(
                    id=f"train-{index:04d}", split='train', role=role, duration_s=seconds,
                    frames=int(seconds * 100), features={'mel': 'unused.mel'},
                ))
        return Manifest(entries)

    def test_identical_durations(self):
        self.assertEqual(duration_ratio(self.manifest([1.0, 2.5], [1.0, 2.5])), 1.0)

    def test_twice_as_long(self):
        manifest = self.manifest([1.0, 2.0, 0.5], [2.0, 4.0, 1.0])
        self.assertEqual(duration_ratio(manifest), 2.0)
        self.assertEqual(duration_ratio(manifest, reverse=True), 0.5)

    def test_empty_split(self):
        with self.assertRaises(DataError):
            duration_ratio(self.manifest([1.0], [1.0]), split='val')

    def test_generated_corpus(self):
        with tempfile.TemporaryDirectory() as tmp:
            manifest = build_corpus(CorpusSpecFactory(), tmp, MelConfigFactory())
        self.assertAlmostEqual(duration_ratio(manifest), 0.8, delta=0.05)
