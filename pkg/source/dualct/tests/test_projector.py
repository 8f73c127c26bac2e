import math
import unittest

import numpy as np

from dualct.acquisition import disc_phantom, shepp_logan
from dualct.dualct_error import DomainError, ShapeError
from dualct.geometry import FanBeamGeometry, ImageGrid, roi_radius_mm, scaled_geometry, truncation_mask
from dualct.projector import (
    Image,
    Role,
    Sinogram,
    back_project,
    backproject_values,
    cosine_weights,
    fbp,
    fbp_adjoint,
    forward_project,
    project_values,
    ramp_filter,
    ramp_filter_adjoint,
    ramp_kernel,
)

from .helpers import small_pair


def _inner(a, b):
    return float(np.sum(np.asarray(a, dtype=np.float64) * np.asarray(b, dtype=np.float64)))


class TestProjector(unittest.TestCase):
    def setUp(self):
        self.grid, self.geom = small_pair()
        self.rng = np.random.default_rng(7)

    def test_adjoint_pair(self):
        for _ in range(10):
            f = self.rng.standard_normal(self.grid.shape)
            g = self.rng.standard_normal(self.geom.shape)
            lhs = _inner(project_values(f, self.geom, self.grid), g)
            rhs = _inner(f, backproject_values(g, self.geom, self.grid))
            self.assertLess(abs(lhs - rhs), 1e-10 * max(abs(lhs), 1.0))

    def test_typed_wrappers(self):
        f = Image(self.grid, self.rng.random(self.grid.shape))
        sino = forward_project(f, self.geom)
        self.assertEqual(sino.values.shape, self.geom.shape)
        self.assertEqual(sino.values.dtype, np.float32)
        self.assertEqual(back_project(sino, self.grid).values.shape, self.grid.shape)
        zero = forward_project(Image(self.grid, np.zeros(self.grid.shape)), self.geom)
        self.assertFalse(np.any(zero.values))

    def test_shape_checks(self):
        with self.assertRaises(ShapeError):
            Image(self.grid, np.zeros((3, 3)))
        with self.assertRaises(ShapeError):
            Sinogram(self.geom, np.zeros((3, 3)))
        with self.assertRaises(DomainError):
            Image(self.grid, np.full(self.grid.shape, np.nan))
        tiny_detector = FanBeamGeometry(12, 8, 1.0, 1000.0, 1500.0)
        with self.assertRaises(DomainError):
            forward_project(Image(self.grid, np.zeros(self.grid.shape)), tiny_detector)

    def test_threads_do_not_change_results(self):
        f = self.rng.standard_normal(self.grid.shape)
        g = self.rng.standard_normal(self.geom.shape)
        np.testing.assert_array_equal(
            project_values(f, self.geom, self.grid, workers=1), project_values(f, self.geom, self.grid, workers=3)
        )
        np.testing.assert_array_equal(
            backproject_values(g, self.geom, self.grid, workers=1), backproject_values(g, self.geom, self.grid, workers=3)
        )

    def test_rotation_covariance(self):
        f = self.rng.random(self.grid.shape)
        sino = project_values(f, self.geom, self.grid)
        rotated = project_values(np.rot90(f), self.geom, self.grid)
        np.testing.assert_allclose(rotated, np.roll(sino, self.geom.n_views // 4, axis=0), rtol=1e-9, atol=1e-9)

    def test_disc_chord_lengths(self):
        grid = ImageGrid(128, 128, 4.0)
        geom = FanBeamGeometry(n_views=4, n_dets=180, det_pitch_mm=8.0, sod_mm=1000.0, sdd_mm=1500.0)
        radius = 200.0
        sino = forward_project(disc_phantom(grid, radius), geom).values
        gamma = np.arctan(geom.detector_positions() / geom.sdd_mm)
        s = geom.sod_mm * np.abs(np.sin(gamma))
        inner = s <= 0.8 * radius
        chords = 2.0 * np.sqrt(radius ** 2 - s[inner] ** 2)
        for view in sino:
            np.testing.assert_allclose(view[inner], chords, rtol=1e-2)
            self.assertTrue(np.all(view[s > radius + 3 * grid.pixel_size_mm] == 0))

    def test_ramp_kernel(self):
        padded, spectrum = ramp_kernel(128, 1.0)
        self.assertEqual(padded, 256)
        self.assertLess(abs(spectrum[0]), 1e-2 * 0.25)
        self.assertGreater(spectrum[-1], spectrum[1])
        _, hann = ramp_kernel(128, 1.0, "hann")
        self.assertTrue(np.all(np.abs(hann) <= np.abs(spectrum) + 1e-15))
        with self.assertRaises(DomainError):
            ramp_kernel(128, 1.0, "cosine")

    def test_filter_and_fbp_adjoints(self):
        for window in ("ram-lak", "hann"):
            s = Sinogram(self.geom, self.rng.standard_normal(self.geom.shape))
            t = Sinogram(self.geom, self.rng.standard_normal(self.geom.shape))
            lhs = _inner(ramp_filter(s, window).values, t.values)
            rhs = _inner(s.values, ramp_filter_adjoint(t, window).values)
            self.assertLess(abs(lhs - rhs), 1e-9 * abs(lhs))

            img = Image(self.grid, self.rng.standard_normal(self.grid.shape))
            lhs = _inner(fbp(s, self.grid, window).values, img.values)
            rhs = _inner(s.values, fbp_adjoint(img, self.geom, window).values)
            self.assertLess(abs(lhs - rhs), 1e-9 * abs(lhs))

    def test_fbp_round_trip(self):
        grid = ImageGrid(128, 128, 4.0)
        geom = FanBeamGeometry(n_views=360, n_dets=512, det_pitch_mm=1440.0 / 512, sod_mm=1000.0, sdd_mm=1500.0)
        f = disc_phantom(grid, 0.5 * grid.inscribed_radius_mm, 0.02)
        recon = fbp(forward_project(f, geom), grid)
        self.assertEqual(recon.role, Role.FBP)
        region = grid.radius_map() < 0.9 * min(grid.inscribed_radius_mm, geom.fov_radius_mm)
        a, b = f.values[region].astype(np.float64), recon.values[region].astype(np.float64)
        self.assertLess(np.sum((a - b) ** 2) / np.sum(a ** 2), 2e-2)
        centre = grid.radius_map() < 0.25 * grid.inscribed_radius_mm
        self.assertAlmostEqual(float(np.mean(recon.values[centre])), 0.02, delta=0.002)

    def test_ramp_filter_impulse_response(self):
        geom = FanBeamGeometry(n_views=2, n_dets=64, det_pitch_mm=2.0, sod_mm=1000.0, sdd_mm=1500.0)
        centre, du = 32, geom.det_pitch_mm
        impulse = np.zeros(geom.shape)
        impulse[:, centre] = 1.0
        response = ramp_filter(Sinogram(geom, impulse)).values / cosine_weights(geom)[centre]
        k = np.arange(geom.n_dets) - centre
        odd = k % 2 == 1
        expected = np.zeros(geom.n_dets)
        expected[k == 0] = 1.0 / (4.0 * du ** 2)
        expected[odd] = -1.0 / (math.pi ** 2 * k[odd].astype(np.float64) ** 2 * du ** 2)
        for view in response:
            np.testing.assert_allclose(view, expected, rtol=0, atol=1e-12 / du ** 2)

    def test_fbp_is_linear(self):
        s1 = self.rng.standard_normal(self.geom.shape)
        s2 = self.rng.standard_normal(self.geom.shape)
        a, b = 2.5, -0.75
        combined = fbp(Sinogram(self.geom, a * s1 + b * s2), self.grid).values
        separate = a * fbp(Sinogram(self.geom, s1), self.grid).values + b * fbp(Sinogram(self.geom, s2), self.grid).values
        np.testing.assert_allclose(combined, separate, rtol=0, atol=1e-9 * np.max(np.abs(separate)))

    def test_more_views_reconstruct_better(self):
        grid = ImageGrid(128, 128, 4.0)
        f = Image(grid, 0.02 * shepp_logan(grid).values)
        region = grid.radius_map() < 0.9 * grid.inscribed_radius_mm
        errors = []
        for views in (90, 180, 360):
            geom = FanBeamGeometry(n_views=views, n_dets=512, det_pitch_mm=1440.0 / 512, sod_mm=1000.0, sdd_mm=1500.0)
            recon = fbp(forward_project(f, geom), grid).values.astype(np.float64)
            a = f.values[region].astype(np.float64)
            errors.append(np.sum((a - recon[region]) ** 2) / np.sum(a ** 2))
        self.assertLess(errors[1], errors[0])
        self.assertLess(errors[2], errors[1])

    def test_truncation_cups_the_interior(self):
        grid = ImageGrid(128, 128, 4.0)
        geom = scaled_geometry(0.25)
        f = disc_phantom(grid, 0.9 * grid.inscribed_radius_mm, 0.02)
        T = truncation_mask(geom, 0.58)
        recon = fbp(Sinogram(geom, forward_project(f, geom).values * T.values), grid).values
        mu = roi_radius_mm(geom, T.kept)
        radius = grid.radius_map()
        rim = recon[(radius >= 0.8 * mu) & (radius < mu)]
        centre = recon[radius < 0.2 * mu]
        self.assertGreater(float(np.mean(rim)), float(np.mean(centre)))
