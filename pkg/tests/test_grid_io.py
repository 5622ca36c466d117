# tests/test_grid_io.py
import json
import unittest
from pathlib import Path
import tempfile

import numpy as np
from PIL import Image

from topoot.src.exceptions import FormatError, StructuralError, ValidationError
from topoot.src.grid_io import (BinaryMask, DefectShape, ScoreGrid, SyntheticSpec, derive_seed,
                                infer_format, load_features, load_grid, load_mask, random_blob_spec,
                                rescale, save_features, save_grid, save_mask, splitmix64,
                                splitmix64_uniform, synth)


class TestScoreGrid(unittest.TestCase):
    def test_rejects_out_of_range_and_non_finite(self):
        with self.assertRaises(ValidationError):
            ScoreGrid(np.array([[0.5, 1.5]]))
        with self.assertRaises(ValidationError):
            ScoreGrid(np.array([[0.5, np.nan]]))
        with self.assertRaises(StructuralError):
            ScoreGrid(np.zeros(4))

    def test_from_raw_rescales(self):
        grid = ScoreGrid.from_raw(np.array([[2.0, 4.0], [6.0, 10.0]]))
        np.testing.assert_allclose(grid.values, [[0.0, 0.25], [0.5, 1.0]])

    def test_constant_input_rescales_to_zero(self):
        np.testing.assert_array_equal(rescale(np.full((2, 2), 7.0)), np.zeros((2, 2)))

    def test_values_are_read_only(self):
        grid = ScoreGrid(np.zeros((2, 2)))
        with self.assertRaises(ValueError):
            grid.values[0, 0] = 1.0


class TestBinaryMask(unittest.TestCase):
    def test_union_and_equality(self):
        a = BinaryMask(np.array([[True, False]]))
        b = BinaryMask(np.array([[False, True]]))
        self.assertEqual(a | b, BinaryMask(np.ones((1, 2), dtype=bool)))
        self.assertEqual((a | b).count, 2)

    def test_union_rejects_shape_mismatch(self):
        with self.assertRaises(StructuralError):
            BinaryMask.empty(2, 2) | BinaryMask.empty(2, 3)


class TestSplitMix(unittest.TestCase):
    def test_reference_outputs_for_seed_zero(self):
        outputs = [int(v) for v in splitmix64(0, 2)]
        self.assertEqual(outputs, [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4])

    def test_uniform_range(self):
        draws = splitmix64_uniform(42, 1000)
        self.assertTrue(np.all((draws >= 0.0) & (draws < 1.0)))

    def test_derive_seed_is_indexed_output(self):
        self.assertEqual(derive_seed(0, 1), 0x6E789E6AA1B965F4)
        self.assertNotEqual(derive_seed(5, 0), derive_seed(5, 1))


class TestLoading(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def test_infer_format(self):
        self.assertEqual(infer_format("a.f32"), "raw-f32")
        self.assertEqual(infer_format("a.CSV"), "csv")
        self.assertEqual(infer_format("a.pgm"), "gray-image")
        with self.assertRaises(ValidationError):
            infer_format("a.tiff")

    def test_raw_f32_header(self):
        path = self.tmp / "g.f32"
        save_grid(ScoreGrid(np.array([[0.0, 0.5], [0.25, 1.0]])), path)
        self.assertTrue(path.read_bytes().startswith(b'{"h":2,"w":2}\n'))

    def test_synthetic_grids_survive_save_and_load_bit_for_bit(self):
        for index in range(10):
            grid, _ = synth(random_blob_spec(index, size=20, seed=5, drift=0.3))
            self.assertGreater(grid.values.min(), 0.0)
            path = self.tmp / f"g{index}.f32"
            save_grid(grid, path)
            self.assertTrue(np.array_equal(load_grid(path).values, grid.values))

    def test_loaded_grid_survives_a_second_save(self):
        path = self.tmp / "g.csv"
        path.write_text("3,7.5\n-2,11\n")
        grid = load_grid(path)
        save_grid(grid, self.tmp / "g.f32")
        self.assertTrue(np.array_equal(load_grid(self.tmp / "g.f32").values, grid.values))

    def test_in_range_csv_is_kept(self):
        path = self.tmp / "g.csv"
        path.write_text("0.25,0.5\n0.75,0.5\n")
        np.testing.assert_array_equal(load_grid(path).values, [[0.25, 0.5], [0.75, 0.5]])

    def test_raw_f32_short_payload(self):
        path = self.tmp / "g.f32"
        path.write_bytes(b'{"h":2,"w":2}\n' + np.zeros(3, dtype="<f4").tobytes())
        with self.assertRaises(StructuralError):
            load_grid(path)

    def test_raw_f32_bad_header_reports_offset(self):
        path = self.tmp / "g.f32"
        path.write_bytes(b'{"h":2,\n')
        with self.assertRaises(FormatError) as ctx:
            load_grid(path)
        self.assertEqual(ctx.exception.path, str(path))

    def test_raw_f32_non_finite_offset(self):
        path = self.tmp / "g.f32"
        header = b'{"h":1,"w":3}\n'
        path.write_bytes(header + np.array([0.1, np.inf, 0.3], dtype="<f4").tobytes())
        with self.assertRaises(FormatError) as ctx:
            load_grid(path)
        self.assertEqual(ctx.exception.offset, len(header) + 4)

    def test_eight_bit_image_rescales_linearly(self):
        path = self.tmp / "g.pgm"
        Image.fromarray(np.array([[0, 128, 255]], dtype=np.uint8)).save(path)
        np.testing.assert_allclose(load_grid(path).values, [[0.0, 128 / 255, 1.0]])

    def test_constant_raw_f32_loads_as_zeros(self):
        path = self.tmp / "g.f32"
        path.write_bytes(b'{"h":2,"w":3}\n' + np.full(6, 0.5, dtype="<f4").tobytes())
        np.testing.assert_array_equal(load_grid(path).values, np.zeros((2, 3)))

    def test_csv_values_zero_to_eight(self):
        path = self.tmp / "g.csv"
        path.write_text("0,1,2\n3,4,5\n6,7,8\n")
        np.testing.assert_allclose(load_grid(path).values, np.arange(9).reshape(3, 3) / 8)

    def test_random_masks_survive_save_and_load(self):
        rng = np.random.default_rng(0)
        for k in range(50):
            mask = BinaryMask(rng.random((5, 7)) < 0.3)
            path = self.tmp / f"m{k}.png"
            save_mask(mask, path)
            self.assertEqual(load_mask(path), mask)

    def test_single_pixel_mask_image(self):
        bits = np.zeros((3, 3), dtype=bool)
        bits[0, 0] = True
        path = self.tmp / "m.png"
        save_mask(BinaryMask(bits), path)
        with Image.open(path) as img:
            pixels = np.array(img)
        self.assertEqual(pixels[0, 0], 255)
        self.assertEqual(int(pixels.sum()), 255)

    def test_csv_grid(self):
        path = self.tmp / "g.csv"
        path.write_text("0,5\n10,5\n")
        np.testing.assert_allclose(load_grid(path).values, [[0.0, 0.5], [1.0, 0.5]])

    def test_csv_ragged_rows(self):
        path = self.tmp / "g.csv"
        path.write_text("0,1\n2\n")
        with self.assertRaises(StructuralError):
            load_grid(path)

    def test_csv_bad_token_offset(self):
        path = self.tmp / "g.csv"
        path.write_bytes(b"0,1\n2,x\n")
        with self.assertRaises(FormatError) as ctx:
            load_grid(path)
        self.assertEqual(ctx.exception.offset, 6)

    def test_gray_image_16_bit(self):
        path = self.tmp / "g.png"
        Image.fromarray(np.array([[0, 1000], [2000, 4000]], dtype=np.uint16)).save(path)
        np.testing.assert_allclose(load_grid(path).values, [[0.0, 0.25], [0.5, 1.0]])

    def test_rgb_image_is_rejected(self):
        path = self.tmp / "g.png"
        Image.new("RGB", (3, 3)).save(path)
        with self.assertRaises(FormatError):
            load_grid(path)

    def test_mask_save_then_load(self):
        mask = BinaryMask(np.array([[True, False], [False, True]]))
        path = self.tmp / "m.png"
        save_mask(mask, path)
        with Image.open(path) as img:
            self.assertEqual(img.mode, "L")
            self.assertEqual(set(np.unique(np.array(img)).tolist()), {0, 255})
        self.assertEqual(load_mask(path), mask)

    def test_features_shape_check(self):
        path = self.tmp / "f.f32"
        save_features(np.zeros((2, 3, 4), dtype=np.float32), path)
        self.assertEqual(load_features(path, 2, 3).shape, (2, 3, 4))
        with self.assertRaises(StructuralError):
            load_features(path, 3, 2)

    def test_multi_channel_file_is_not_a_grid(self):
        path = self.tmp / "f.f32"
        save_features(np.zeros((2, 2, 3), dtype=np.float32), path)
        with self.assertRaises(StructuralError):
            load_grid(path)
        self.assertEqual(json.loads(path.read_bytes().split(b"\n")[0]), {"h": 2, "w": 2, "c": 3})


class TestSynth(unittest.TestCase):
    def test_noise_free_disk(self):
        spec = SyntheticSpec(height=9, width=9, background=0.1,
                             defects=(DefectShape(center=(4, 4), peak=0.9, radius=2),))
        grid, truth = synth(spec)
        self.assertEqual(truth.count, 13)
        np.testing.assert_allclose(grid.values[truth.bits], 0.9)
        np.testing.assert_allclose(grid.values[~truth.bits], 0.1)

    def test_point_defect(self):
        spec = SyntheticSpec(height=11, width=11, background=0.1,
                             defects=(DefectShape(center=(5, 5), peak=0.9, radius=0),))
        _, truth = synth(spec)
        self.assertEqual(truth.count, 1)
        self.assertTrue(truth.bits[5, 5])

    def test_disk_matches_brute_force_rasterization(self):
        spec = SyntheticSpec(height=32, width=32, defects=(DefectShape(center=(14, 17), peak=0.9, radius=4),))
        _, truth = synth(spec)
        expected = sum(1 for r in range(32) for c in range(32) if (r - 14) ** 2 + (c - 17) ** 2 <= 16)
        self.assertEqual(truth.count, expected)

    def test_box_defect(self):
        spec = SyntheticSpec(height=6, width=8, defects=(DefectShape(center=(2, 3), peak=0.7, half_extent=(1, 2)),))
        _, truth = synth(spec)
        self.assertEqual(truth.count, 15)

    def test_defect_must_fit(self):
        spec = SyntheticSpec(height=6, width=6, defects=(DefectShape(center=(1, 1), peak=0.9, radius=2),))
        with self.assertRaises(ValidationError):
            synth(spec)

    def test_peak_must_exceed_background(self):
        spec = SyntheticSpec(height=6, width=6, background=0.5,
                             defects=(DefectShape(center=(3, 3), peak=0.4, radius=1),))
        with self.assertRaises(ValidationError):
            synth(spec)

    def test_seeded_noise_is_reproducible(self):
        spec = random_blob_spec(3, size=20, seed=11)
        first, _ = synth(spec)
        second, _ = synth(random_blob_spec(3, size=20, seed=11))
        np.testing.assert_array_equal(first.values, second.values)
        self.assertLessEqual(float(first.values.max()), 1.0)

    def test_blob_corpus_needs_room(self):
        with self.assertRaises(ValidationError):
            random_blob_spec(0, size=8)


if __name__ == '__main__':
    unittest.main()
