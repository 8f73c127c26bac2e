import math
import unittest

import numpy as np

from dualct.acquisition import DatasetConfig, build_dataset
from dualct.dualct_error import ConfigurationError, DomainError, NumericalError, ShapeError
from dualct.geometry import ImageGrid, truncation_mask
from dualct.nn.tensor import Parameter, Tensor, backward
from dualct.pipelines import (
    ArchitectureKind,
    FbpLayer,
    LossOptions,
    TrainConfig,
    build_model,
    compose_corrected,
    compose_corrected_sinogram,
    loss_dualnet,
    loss_image_unet,
    loss_projection_unet,
    loss_wnet,
    reconstruct,
    stage_features,
    train,
)
from dualct.pipelines.architectures import EXTRA_HEAD, IMAGE_HEAD, NOISE_HEAD, pad_to_multiple
from dualct.pipelines.objectives import masked_squared_error, projection_terms
from dualct.pipelines.training import make_batch, new_training_state, training_step
from dualct.projector import Sinogram, fbp

from .helpers import check_gradient, tiny_geometry, tiny_grid

TINY_TRAIN = dict(epochs=2, batch=2, depth=2, base_channels=2)


def _tiny_data(n_phantoms=2, seed=0, split="train"):
    config = DatasetConfig(grid=tiny_grid(), geom=tiny_geometry(), n_phantoms=n_phantoms, ratio=0.4, i0=1e6)
    return build_dataset(config, seed, split)


class TestFbpLayer(unittest.TestCase):
    def setUp(self):
        self.grid, self.geom = tiny_grid(), tiny_geometry()
        self.layer = FbpLayer(self.geom, self.grid)
        self.rng = np.random.default_rng(0)

    def test_dot_product(self):
        s = self.rng.standard_normal((2, 1) + self.geom.shape)
        g = self.rng.standard_normal((2, 1) + self.grid.shape)
        lhs = float(np.sum(self.layer.forward_values(s) * g))
        rhs = float(np.sum(s * self.layer.backward_values(g)))
        self.assertLess(abs(lhs - rhs), 1e-4 * abs(lhs))

    def test_loss_gradient(self):
        s = Tensor(self.rng.standard_normal((1, 1) + self.geom.shape), requires_grad=True, dtype=np.float64)
        target = self.rng.standard_normal((1, 1) + self.grid.shape)
        roi = (self.grid.radius_map() < 150.0).astype(np.float64)
        check_gradient(self, lambda: masked_squared_error(self.layer(s) - target, roi), s, n_checks=6)

    def test_batch_shape(self):
        with self.assertRaises(ShapeError):
            self.layer.forward_values(np.zeros(self.geom.shape))


class TestObjectives(unittest.TestCase):
    def setUp(self):
        self.geom = tiny_geometry()
        self.T = truncation_mask(self.geom, 0.5)
        self.rng = np.random.default_rng(1)

    def test_compose(self):
        p, h, z = (Sinogram(self.geom, self.rng.random(self.geom.shape)) for _ in range(3))
        out = compose_corrected_sinogram(p, h, z, self.T).values
        inside = self.T.values == 1
        np.testing.assert_allclose(out[inside], (p.values - h.values)[inside], rtol=1e-6)
        np.testing.assert_allclose(out[~inside], z.values[~inside])

        h_t = Tensor(h.values, requires_grad=True)
        z_t = Tensor(z.values, requires_grad=True)
        backward(compose_corrected(p.values, h_t, z_t, self.T.values).sum())
        np.testing.assert_array_equal(h_t.grad, -self.T.values)
        np.testing.assert_array_equal(z_t.grad, self.T.complement())

    def test_reductions(self):
        diff = Tensor(np.full((2, 1, 2, 2), 2.0), dtype=np.float64)
        mask = np.array([[1.0, 0.0], [1.0, 1.0]])
        self.assertAlmostEqual(float(masked_squared_error(diff, mask, "sum").values), 24.0)
        self.assertAlmostEqual(float(masked_squared_error(diff, mask, "mean").values), 4.0)
        with self.assertRaises(DomainError):
            masked_squared_error(diff, np.zeros((2, 2)))
        with self.assertRaises(DomainError):
            LossOptions(reduction="median")

    def test_image_loss_is_residual(self):
        q = self.rng.random((1, 1, 4, 4))
        f = self.rng.random((1, 1, 4, 4))
        I = np.ones((4, 4))
        perfect = loss_image_unet(q, f, I, Tensor(q - f))
        self.assertAlmostEqual(float(perfect.values), 0.0, places=6)

    def test_detach_h(self):
        grid = tiny_grid()
        layer = FbpLayer(self.geom, grid)
        shape = (1, 1) + self.geom.shape
        p, y = self.rng.random(shape), self.rng.random(shape)
        f = self.rng.random((1, 1) + grid.shape)
        I = (grid.radius_map() < 100.0).astype(np.float64)
        T = self.T.values
        z = Tensor(self.rng.random(shape), requires_grad=True, dtype=np.float64)
        h0 = self.rng.random(shape)
        grads = {}
        for detach in (True, False):
            h = Tensor(h0, requires_grad=True, dtype=np.float64)
            backward(loss_projection_unet(p, y, f, T, I, h, z, layer, LossOptions(detach_h=detach)))
            grads[detach] = h.grad
        count = T.sum()
        noise_only = -2.0 * T * ((p - y) - h0) / count
        np.testing.assert_allclose(grads[True], noise_only, rtol=1e-6, atol=1e-12)
        self.assertFalse(np.allclose(grads[False], noise_only))

    def test_stage_barrier(self):
        q = self.rng.random((1, 1, 4, 4))
        f = self.rng.random((1, 1, 4, 4))
        I = np.ones((4, 4))
        a = Parameter(np.array([0.3]), dtype=np.float64)
        b = Parameter(np.array([0.7]), dtype=np.float64)
        backward(loss_wnet(q, f, I, lambda x: x * a, lambda x: x * b, LossOptions(barrier=True)))
        with_barrier = a.grad.copy()
        a.zero_grad()
        backward(loss_image_unet(q, f, I, Tensor(q) * a))
        np.testing.assert_allclose(with_barrier, a.grad)
        a.zero_grad()
        backward(loss_wnet(q, f, I, lambda x: x * a, lambda x: x * b, LossOptions(barrier=False)))
        self.assertFalse(np.allclose(a.grad, with_barrier))

    def _dual_inputs(self):
        grid = tiny_grid()
        layer = FbpLayer(self.geom, grid)
        shape = (1, 1) + self.geom.shape
        p, y = self.rng.random(shape), self.rng.random(shape)
        f = self.rng.random((1, 1) + grid.shape)
        I = (grid.radius_map() < 100.0).astype(np.float64)
        h = Tensor(self.rng.random(shape), requires_grad=True, dtype=np.float64)
        z = Tensor(self.rng.random(shape), requires_grad=True, dtype=np.float64)
        return p, y, f, self.T.values, I, h, z, layer

    def test_dualnet_loss_is_sum_of_terms(self):
        p, y, f, T, I, h, z, layer = self._dual_inputs()
        b = Parameter(np.array([0.4]), dtype=np.float64)
        stage2 = lambda x: x * b
        total = loss_dualnet(p, y, f, T, I, (h, z), stage2, layer)
        term1, term2, q_bar = projection_terms(p, y, f, T, I, h, z, layer)
        term3 = loss_image_unet(q_bar, f, I, stage2(q_bar))
        expected = float(term1.values) + float(term2.values) + float(term3.values)
        self.assertAlmostEqual(float(total.values), expected, delta=1e-9 * abs(expected))

    def test_dualnet_barrier(self):
        p, y, f, T, I, h, z, layer = self._dual_inputs()
        b = Parameter(np.array([0.4]), dtype=np.float64)
        backward(loss_projection_unet(p, y, f, T, I, h, z, layer))
        first_stage_only = z.grad.copy()
        z.zero_grad()
        backward(loss_dualnet(p, y, f, T, I, (h, z), lambda x: x * b, layer, LossOptions(barrier=True)))
        np.testing.assert_allclose(z.grad, first_stage_only, rtol=1e-9, atol=1e-15)
        self.assertIsNotNone(b.grad)
        z.zero_grad()
        backward(loss_dualnet(p, y, f, T, I, (h, z), lambda x: x * b, layer, LossOptions(barrier=False)))
        self.assertFalse(np.allclose(z.grad, first_stage_only))


class TestArchitectures(unittest.TestCase):
    def test_heads_and_widths(self):
        grid, geom = tiny_grid(), tiny_geometry()
        dual = build_model(ArchitectureKind.DUALNET, geom, grid, 2, 2)
        self.assertEqual(set(dual.stage1.heads), {NOISE_HEAD, EXTRA_HEAD})
        self.assertEqual(set(dual.stage2.heads), {IMAGE_HEAD})
        unet = build_model(ArchitectureKind.IMAGE_UNET, geom, grid, 2, 2)
        self.assertIsNone(unet.stage2)
        self.assertEqual(unet.stage1.base_channels, 4)
        wnet = build_model(ArchitectureKind.WNET, geom, grid, 2, 2)
        self.assertTrue(all(name.startswith(("stage1.", "stage2.")) for name in wnet.parameters()))
        with self.assertRaises(ConfigurationError):
            build_model(ArchitectureKind.WNET, geom, ImageGrid(36, 36, 14.0), 2, 4)
        with self.assertRaises(ConfigurationError):
            ArchitectureKind.parse("resnet")
        self.assertEqual(ArchitectureKind.parse("DualNet"), ArchitectureKind.DUALNET)

    def test_pad_to_multiple(self):
        x = np.arange(45 * 90, dtype=np.float32).reshape(1, 1, 45, 90)
        padded = pad_to_multiple(x, 4)
        self.assertEqual(padded.shape, (1, 1, 48, 92))
        np.testing.assert_array_equal(padded[..., :45, :90], x)


class TestTraining(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.data = _tiny_data()
        cls.val = _tiny_data(1, split="val")

    def test_every_architecture_trains(self):
        for arch in ArchitectureKind:
            model, curves = train(arch, self.data, TrainConfig(**TINY_TRAIN), self.val)
            self.assertEqual(len(curves), 2)
            self.assertTrue(all(math.isfinite(v) for v in curves.train + curves.val))
            self.assertEqual([row[0] for row in curves.rows()], [1, 2])
            self.assertEqual(model.manifest["epochs_done"], 2)

    def test_overfits_two_samples(self):
        hyper = TrainConfig(**dict(TINY_TRAIN, lr=3e-3))
        state = new_training_state(ArchitectureKind.DUALNET, self.data, hyper)
        batch = make_batch(state.model, self.data.samples[:2])
        losses = [training_step(state.model, batch, state.optim, hyper.loss_options) for _ in range(50)]
        self.assertEqual(state.optim.step, 50)
        self.assertLess(losses[-1], losses[0])
        self.assertLess(np.mean(losses[-10:]), np.mean(losses[:10]))

    def test_deterministic(self):
        hyper = TrainConfig(**TINY_TRAIN)
        a, _ = train(ArchitectureKind.DUALNET, self.data, hyper)
        b, _ = train(ArchitectureKind.DUALNET, self.data, hyper)
        for name, p in a.parameters().items():
            np.testing.assert_array_equal(p.values, b.parameters()[name].values)

    def test_resume_matches_uninterrupted(self):
        hyper = TrainConfig(**TINY_TRAIN)
        straight, _ = train(ArchitectureKind.WNET, self.data, hyper)
        state = new_training_state(ArchitectureKind.WNET, self.data, hyper)
        train(ArchitectureKind.WNET, self.data, TrainConfig(**dict(TINY_TRAIN, epochs=1)), state=state)
        self.assertEqual(state.epoch, 1)
        resumed, curves = train(ArchitectureKind.WNET, self.data, hyper, state=state)
        self.assertEqual(len(curves), 2)
        for name, p in straight.parameters().items():
            np.testing.assert_array_equal(p.values, resumed.parameters()[name].values)

    def test_non_finite_loss(self):
        state = new_training_state(ArchitectureKind.IMAGE_UNET, self.data, TrainConfig(**TINY_TRAIN))
        next(iter(state.model.parameters().values())).values[...] = np.nan
        batch = make_batch(state.model, self.data.samples)
        with self.assertRaises(NumericalError):
            training_step(state.model, batch, state.optim, LossOptions())

    def test_invalid_config(self):
        with self.assertRaises(ConfigurationError):
            TrainConfig(epochs=0).validate()
        with self.assertRaises(ConfigurationError):
            TrainConfig(reduction="max").validate()


class TestInference(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.data = _tiny_data()
        cls.dual, _ = train(ArchitectureKind.DUALNET, cls.data, TrainConfig(**dict(TINY_TRAIN, epochs=1)))
        cls.unet, _ = train(ArchitectureKind.IMAGE_UNET, cls.data, TrainConfig(**dict(TINY_TRAIN, epochs=1)))

    def test_output_is_confined_to_roi(self):
        sample = self.data[0]
        for model in (self.dual, self.unet):
            image = reconstruct(model, sample.p, sample.T)
            self.assertEqual(image.values.shape, sample.f.values.shape)
            self.assertFalse(np.any(image.values * (1 - sample.I.values)))
            self.assertTrue(np.any(image.values))

    def test_stage_selection(self):
        sample = self.data[0]
        first = reconstruct(self.dual, sample.p, sample.T, stages=1)
        both = reconstruct(self.dual, sample.p, sample.T)
        self.assertFalse(np.array_equal(first.values, both.values))
        with self.assertRaises(ConfigurationError):
            reconstruct(self.unet, sample.p, sample.T, stages=2)

    def test_geometry_mismatch(self):
        other = _tiny_data(1)[0]
        geom = tiny_geometry()
        wrong = Sinogram(type(geom)(geom.n_views, geom.n_dets, geom.det_pitch_mm, 1100.0, 1500.0), other.p.values)
        with self.assertRaises(ShapeError):
            reconstruct(self.dual, wrong, other.T)

    def test_features(self):
        sample = self.data[0]
        sino_maps = stage_features(self.dual, sample.p, sample.T, stage=1)
        self.assertEqual(sino_maps.shape, (2, 46, 90))
        image_maps = stage_features(self.dual, sample.p, sample.T, stage=2)
        self.assertEqual(image_maps.shape, (2, 32, 32))
        self.assertEqual(stage_features(self.unet, sample.p, sample.T).shape, (4, 32, 32))
        with self.assertRaises(ConfigurationError):
            stage_features(self.unet, sample.p, sample.T, stage=2)

    def test_silent_heads_give_plain_fbp(self):
        sample = self.data[0]
        expected = fbp(sample.p, tiny_grid()).values * sample.I.values
        for arch in (ArchitectureKind.DUALNET, ArchitectureKind.WNET, ArchitectureKind.IMAGE_UNET):
            model = build_model(arch, tiny_geometry(), tiny_grid(), 2, 2)
            for net in model.stages():
                for name, param in net.params.items():
                    if ".linear." in name:
                        param.values[...] = 0.0
            image = reconstruct(model, sample.p, sample.T).values
            np.testing.assert_allclose(image, expected, rtol=1e-5, atol=1e-6 * float(np.max(np.abs(expected))))
