# tests/test_metrics.py
import tempfile
import unittest
from pathlib import Path

import numpy as np

from topoot.src.exceptions import StructuralError, ValidationError
from topoot.src.grid_io import BinaryMask, ScoreGrid
from topoot.src.metrics import (aggregate, format_markdown_table, score, scores_from_counts,
                                summarize_by_method, thr_baseline, write_scores_csv)


class TestScore(unittest.TestCase):
    def test_perfect_prediction(self):
        bits = np.zeros((4, 4), dtype=bool)
        bits[1:3, 1:3] = True
        s = score(BinaryMask(bits), BinaryMask(bits))
        self.assertEqual((s.precision, s.recall, s.f1, s.iou), (1.0, 1.0, 1.0, 1.0))
        self.assertEqual(s.total, 16)

    def test_direct_formulas(self):
        s = scores_from_counts(tp=2, fp=1, fn=1, tn=5)
        self.assertAlmostEqual(s.precision, 2 / 3)
        self.assertAlmostEqual(s.recall, 2 / 3)
        self.assertAlmostEqual(s.f1, 2 / 3)
        self.assertAlmostEqual(s.iou, 0.5)

    def test_empty_prediction_against_nonempty_truth(self):
        gt = BinaryMask.empty(3, 3) | BinaryMask(np.eye(3, dtype=bool))
        s = score(BinaryMask.empty(3, 3), gt)
        self.assertEqual((s.precision, s.recall, s.f1, s.iou), (0.0, 0.0, 0.0, 0.0))

    def test_both_empty_is_perfect(self):
        s = score(BinaryMask.empty(2, 2), BinaryMask.empty(2, 2))
        self.assertEqual((s.precision, s.recall, s.f1, s.iou), (1.0, 1.0, 1.0, 1.0))

    def test_shape_mismatch(self):
        with self.assertRaises(StructuralError):
            score(BinaryMask.empty(2, 2), BinaryMask.empty(2, 3))


class TestAggregate(unittest.TestCase):
    def test_single_item(self):
        s = scores_from_counts(3, 1, 2, 10)
        summary = aggregate([s])
        self.assertEqual((summary.precision, summary.recall, summary.f1, summary.iou, summary.count),
                         (s.precision, s.recall, s.f1, s.iou, 1))

    def test_mean_of_two(self):
        low = scores_from_counts(1, 4, 4, 0)
        high = scores_from_counts(4, 1, 1, 0)
        self.assertAlmostEqual(aggregate([low, high]).f1, 0.5)

    def test_order_does_not_matter(self):
        rng = np.random.default_rng(0)
        scores = [scores_from_counts(*map(int, rng.integers(0, 20, 4))) for _ in range(15)]
        forward, backward = aggregate(scores), aggregate(scores[::-1])
        for name in ("precision", "recall", "f1", "iou"):
            self.assertAlmostEqual(getattr(forward, name), getattr(backward, name), places=12)

    def test_empty_list(self):
        with self.assertRaises(ValidationError):
            aggregate([])


class TestBaseline(unittest.TestCase):
    def test_marks_strict_outliers(self):
        values = np.full((10, 10), 0.1)
        values[4, 4] = 1.0
        mask = thr_baseline(ScoreGrid(values), c=3.0)
        self.assertEqual(mask.count, 1)
        self.assertTrue(mask.bits[4, 4])

    def test_constant_grid_marks_nothing(self):
        self.assertEqual(thr_baseline(ScoreGrid(np.full((3, 3), 0.5))).count, 0)


class TestReports(unittest.TestCase):
    def test_csv_rows(self):
        rows = [("a", "TopoOT", scores_from_counts(2, 1, 1, 5))]
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "scores.csv"
            write_scores_csv(rows, path)
            lines = path.read_text(encoding="utf-8").splitlines()
        self.assertEqual(lines[0], "sample,method,tp,fp,fn,tn,precision,recall,f1,iou")
        self.assertEqual(lines[1], "a,TopoOT,2,1,1,5,0.666667,0.666667,0.666667,0.500000")

    def test_markdown_table(self):
        rows = [("a", "TopoOT", scores_from_counts(2, 1, 1, 5)), ("a", "THR", scores_from_counts(0, 0, 3, 5))]
        table = format_markdown_table(summarize_by_method(rows), "Bench")
        self.assertTrue(table.startswith("# Bench\n"))
        self.assertIn("| Method | Prec. | Rec. | F1 | IoU |", table)
        self.assertIn("| TopoOT | 0.667 | 0.667 | 0.667 | 0.500 |", table)
        self.assertIn("| THR | 0.000 | 0.000 | 0.000 | 0.000 |", table)
        self.assertTrue(table.endswith("Samples: 1\n"))


if __name__ == '__main__':
    unittest.main()
