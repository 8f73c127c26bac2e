import math
import unittest

import numpy as np

from dualct.dualct_error import DomainError
from dualct.geometry import (
    FanBeamGeometry,
    ImageGrid,
    ProjectionMask,
    kept_detector_count,
    roi_mask,
    roi_radius_mm,
    scaled_geometry,
    scaled_grid,
    standard_geometry,
    standard_grid,
    truncation_mask,
)


class TestGeometry(unittest.TestCase):
    def test_standard_scan(self):
        geom = standard_geometry()
        self.assertEqual(geom.shape, (720, 1440))
        self.assertTrue(geom.is_full_scan)
        geom.check_covers(standard_grid())
        self.assertAlmostEqual(geom.delta_beta, 2 * math.pi / 720)

    def test_scaled_keeps_fan_angle(self):
        geom = scaled_geometry(0.25)
        self.assertEqual(geom.shape, (180, 360))
        self.assertAlmostEqual(geom.det_pitch_mm, 4.0)
        self.assertAlmostEqual(geom.fan_half_angle, standard_geometry().fan_half_angle)
        grid = scaled_grid(0.25)
        self.assertEqual((grid.nx, grid.pixel_size_mm), (128, 4.0))

    def test_invalid_values(self):
        with self.assertRaises(DomainError):
            ImageGrid(4, 4, 1.0)
        with self.assertRaises(DomainError):
            FanBeamGeometry(10, 10, 1.0, sod_mm=1500.0, sdd_mm=1000.0)
        with self.assertRaises(DomainError):
            scaled_geometry(0.0)
        with self.assertRaises(DomainError):
            FanBeamGeometry(10, 100, 1.0, 1000.0, 1500.0).check_covers(ImageGrid(512, 512, 1.0))

    def test_kept_detector_count(self):
        self.assertEqual(kept_detector_count(1440, 0.0), 1440)
        self.assertEqual(kept_detector_count(1440, 0.58), 604)
        self.assertEqual(kept_detector_count(1440, 0.83), 244)
        self.assertEqual(kept_detector_count(45, 0.5), 23)
        for ratio in (-0.1, 1.0):
            with self.assertRaises(DomainError):
                kept_detector_count(1440, ratio)
        with self.assertRaises(DomainError):
            kept_detector_count(4, 0.9)

    def test_truncation_mask_is_centered(self):
        geom = scaled_geometry(0.125)
        mask = truncation_mask(geom, 0.58)
        self.assertEqual(mask.shape, geom.shape)
        row = mask.values[0]
        self.assertEqual(int(row.sum()), mask.kept)
        np.testing.assert_array_equal(row, row[::-1])
        self.assertTrue(np.all(mask.values == row))
        self.assertEqual(mask.stop - mask.start, mask.kept)
        np.testing.assert_array_equal(mask.complement() + mask.values, 1.0)

    def test_mask_from_values(self):
        geom = scaled_geometry(0.125)
        mask = truncation_mask(geom, 0.4)
        back = ProjectionMask.from_values(np.array(mask.values))
        self.assertEqual((back.kept, back.start), (mask.kept, mask.start))
        gap = np.array(mask.values)
        gap[:, mask.start + 3] = 0
        with self.assertRaises(DomainError):
            ProjectionMask.from_values(gap)

    def test_roi_radius(self):
        geom = standard_geometry()
        full = roi_radius_mm(geom, geom.n_dets)
        self.assertAlmostEqual(full, geom.fov_radius_mm)
        self.assertAlmostEqual(full, 1000.0 * math.sin(math.atan(720.0 / 1500.0)))
        grid = scaled_grid(0.125)
        g = scaled_geometry(0.125)
        wide = roi_mask(grid, g, truncation_mask(g, 0.0))
        narrow = roi_mask(grid, g, truncation_mask(g, 0.74))
        self.assertGreater(wide.values.sum(), narrow.values.sum())
        self.assertTrue(np.all(narrow.values <= wide.values))
        self.assertEqual(narrow.values[grid.ny // 2, grid.nx // 2], 1.0)

    def test_fan_angle_survives_scaling(self):
        reference = standard_geometry()
        for scale in (0.125, 0.25, 0.5, 1.0):
            geom = scaled_geometry(scale)
            self.assertLess(abs(geom.fan_half_angle - reference.fan_half_angle), 1e-9)
            self.assertLess(abs(geom.fov_radius_mm - reference.fov_radius_mm), 1e-9 * reference.fov_radius_mm)
        self.assertEqual(scaled_geometry(1.0), reference)


class TestMaskProperties(unittest.TestCase):
    def setUp(self):
        self.geom = standard_geometry()
        self.ratios = np.linspace(0.0, 0.95, 100)

    def test_kept_count_and_roi_radius_shrink_with_ratio(self):
        kept = np.array([truncation_mask(self.geom, r).kept for r in self.ratios])
        self.assertTrue(np.all(np.diff(kept) <= 0))
        self.assertTrue(np.all(kept % 2 == self.geom.n_dets % 2))
        mu = np.array([roi_radius_mm(self.geom, k) for k in kept])
        step = np.diff(kept) < 0
        self.assertTrue(np.any(step))
        self.assertTrue(np.all(np.diff(mu)[step] < 0))
        np.testing.assert_array_equal(np.diff(mu)[~step], 0.0)

    def test_masks_are_idempotent(self):
        grid = scaled_grid(0.125)
        geom = scaled_geometry(0.125)
        for ratio in self.ratios[::11]:
            T = truncation_mask(geom, float(ratio))
            np.testing.assert_array_equal(T.values * T.values, T.values)
            I = roi_mask(grid, geom, T)
            np.testing.assert_array_equal(I.values * I.values, I.values)
