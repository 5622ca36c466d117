# tests/test_topology/test_filtration.py
import unittest

import numpy as np

from topoot.src.exceptions import DegenerateScheduleError, ValidationError
from topoot.src.grid_io import ScoreGrid
from topoot.src.topology.filtration import (FiltrationTag, ThresholdSchedule, build_complex,
                                            make_schedule)
from tests.conftest import random_grid


class TestThresholdSchedule(unittest.TestCase):
    def setUp(self):
        self.unit_grid = ScoreGrid(np.array([[0.0, 0.4], [0.7, 1.0]]))

    def test_uniform_interior_points(self):
        schedule = make_schedule(self.unit_grid, 3, "uniform")
        np.testing.assert_allclose(schedule.taus, [0.25, 0.5, 0.75])

    def test_uniform_two_thresholds(self):
        schedule = make_schedule(self.unit_grid, 2)
        np.testing.assert_allclose(schedule.taus, [1 / 3, 2 / 3])

    def test_uniform_stays_inside_range(self):
        grid = random_grid(5, 6)
        schedule = make_schedule(grid, 10)
        self.assertEqual(len(schedule), 10)
        self.assertGreater(schedule.taus[0], grid.values.min())
        self.assertLess(schedule.taus[-1], grid.values.max())

    def test_quantile_matches_sorted_oracle(self):
        grid = random_grid(11, 7, 5)
        ordered = np.sort(grid.values.ravel())
        expected = []
        for k in range(1, 5):
            position = k / 5 * (ordered.size - 1)
            lo = int(np.floor(position))
            hi = min(lo + 1, ordered.size - 1)
            expected.append(ordered[lo] + (position - lo) * (ordered[hi] - ordered[lo]))
        schedule = make_schedule(grid, 4, "quantile")
        np.testing.assert_allclose(schedule.taus, expected, rtol=1e-12)

    def test_quantile_collapses_duplicates(self):
        values = np.zeros((4, 4))
        values[0, :] = 1.0
        values[1, :2] = 0.5
        schedule = make_schedule(ScoreGrid(values), 5, "quantile")
        self.assertLess(len(schedule), 5)
        self.assertTrue(all(b > a for a, b in zip(schedule.taus, schedule.taus[1:])))

    def test_constant_grid_is_degenerate(self):
        grid = ScoreGrid(np.full((3, 3), 0.4))
        with self.assertRaises(DegenerateScheduleError):
            make_schedule(grid, 4, "quantile")
        with self.assertRaises(DegenerateScheduleError):
            make_schedule(grid, 4, "uniform")

    def test_rejects_bad_arguments(self):
        with self.assertRaises(ValidationError):
            make_schedule(self.unit_grid, 1)
        with self.assertRaises(ValidationError):
            make_schedule(self.unit_grid, 3, "log")
        with self.assertRaises(ValidationError):
            ThresholdSchedule((0.2, 0.2, 0.5))
        with self.assertRaises(DegenerateScheduleError):
            ThresholdSchedule((0.2,))

    def test_superlevel_levels_are_negated_and_reversed(self):
        schedule = ThresholdSchedule((0.2, 0.5, 0.7))
        self.assertEqual(schedule.levels(FiltrationTag.SUBLEVEL), [0.2, 0.5, 0.7])
        self.assertEqual(schedule.levels(FiltrationTag.SUPERLEVEL), [-0.7, -0.5, -0.2])


class TestCubicalComplex(unittest.TestCase):
    def test_two_pixel_sublevel(self):
        complex = build_complex(ScoreGrid(np.array([[0.2, 0.8]])), FiltrationTag.SUBLEVEL)
        np.testing.assert_array_equal(complex.vertices, [[0.2, 0.8]])
        np.testing.assert_array_equal(complex.h_edges, [[0.8]])
        self.assertEqual(complex.v_edges.size, 0)
        self.assertEqual(complex.squares.size, 0)

    def test_two_pixel_superlevel(self):
        complex = build_complex(ScoreGrid(np.array([[0.2, 0.8]])), FiltrationTag.SUPERLEVEL)
        np.testing.assert_array_equal(complex.vertices, [[-0.2, -0.8]])
        np.testing.assert_array_equal(complex.h_edges, [[-0.2]])

    def test_cell_counts(self):
        complex = build_complex(random_grid(2, 4, 6), FiltrationTag.SUBLEVEL)
        self.assertEqual(complex.cell_counts(), (24, 4 * 5 + 6 * 3, 3 * 5))

    def test_monotone_and_lower_star_exhaustively(self):
        """Every cell of a 3x3 complex equals the max of its vertices and dominates its faces."""
        for tag in FiltrationTag:
            complex = build_complex(random_grid(3, 3), tag)
            v = complex.vertices
            checked = 0
            for r in range(3):
                for c in range(2):
                    edge = complex.h_edges[r, c]
                    self.assertEqual(edge, max(v[r, c], v[r, c + 1]))
                    checked += 1
            for r in range(2):
                for c in range(3):
                    edge = complex.v_edges[r, c]
                    self.assertEqual(edge, max(v[r, c], v[r + 1, c]))
                    checked += 1
            for r in range(2):
                for c in range(2):
                    square = complex.squares[r, c]
                    faces = [complex.h_edges[r, c], complex.h_edges[r + 1, c],
                             complex.v_edges[r, c], complex.v_edges[r, c + 1]]
                    self.assertTrue(all(square >= f for f in faces))
                    self.assertEqual(square, v[r:r + 2, c:c + 2].max())
                    checked += 1
            self.assertEqual(checked + v.size, 21)

    def test_sublevel_of_a_is_superlevel_of_complement(self):
        grid = random_grid(4, 5)
        sub = build_complex(grid, FiltrationTag.SUBLEVEL)
        sup = build_complex(ScoreGrid(1.0 - grid.values), FiltrationTag.SUPERLEVEL)
        for name in ("vertices", "h_edges", "v_edges", "squares"):
            np.testing.assert_allclose(getattr(sub, name) - 1.0, getattr(sup, name), atol=1e-15)

    def test_arrays_are_read_only(self):
        complex = build_complex(random_grid(6, 3), FiltrationTag.SUBLEVEL)
        with self.assertRaises(ValueError):
            complex.squares[0, 0] = 0.0

    def test_euler_characteristic_of_full_complex(self):
        complex = build_complex(random_grid(8, 4), FiltrationTag.SUBLEVEL)
        self.assertEqual(complex.euler_characteristic(complex.max_value), 1)

    def test_tag_parsing(self):
        self.assertIs(FiltrationTag.parse("sup"), FiltrationTag.SUPERLEVEL)
        self.assertIs(FiltrationTag.parse("Sublevel"), FiltrationTag.SUBLEVEL)
        with self.assertRaises(ValidationError):
            FiltrationTag.parse("middle")


if __name__ == '__main__':
    unittest.main()
