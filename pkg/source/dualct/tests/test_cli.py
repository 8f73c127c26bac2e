import contextlib
import io
import os
import tempfile
import unittest

import numpy as np
import pandas as pd
from PIL import Image as PilImage

from dualct.acquisition import WATER_MU_PER_MM
from dualct.cli import main, render_window, to_hounsfield
from dualct.config import ExperimentConfig
from dualct.container import read_container, write_container
from dualct.dualct_error import ConfigurationError
from dualct.messages import clear_messages, messages
from dualct.projector import Sinogram, fbp

TINY_TRAIN = [
    "--set", "train.arch=image-unet", "--set", "train.epochs=2", "--set", "train.batch=2",
    "--set", "train.depth=2", "--set", "train.base_channels=2", "--set", "sim.n_phantoms=2",
    "--set", "sim.ratio=0.4", "--set", "sim.i0=1e6", "--set", "sim.test_phantoms=1",
]


class CliTestCase(unittest.TestCase):
    def setUp(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.out = tmp.name

    def common(self, out=None):
        return ["--set", f"paths.out_dir={out or self.out}", "--set", "geom.scale=0.0625"]

    def run_cli(self, command, *args, out=None):
        with contextlib.redirect_stdout(io.StringIO()), contextlib.redirect_stderr(io.StringIO()):
            return main([command, *self.common(out), *args])

    def path(self, *parts):
        return os.path.join(self.out, *parts)

    def read_bytes(self, *parts):
        with open(self.path(*parts), "rb") as f:
            return f.read()


class TestDataCommands(CliTestCase):
    def test_phantom(self):
        self.assertEqual(self.run_cli("phantom", "--kind", "random-ellipses", "--seed", "5", "--out", "a.ctdl"), 0)
        self.assertEqual(self.run_cli("phantom", "--kind", "random-ellipses", "--seed", "5", "--out", "b.ctdl"), 0)
        self.assertEqual(self.read_bytes("a.ctdl"), self.read_bytes("b.ctdl"))
        self.assertEqual(read_container(self.path("a.ctdl")).shape, (32, 32))
        self.assertTrue(os.path.exists(self.path("config.cfg")))
        self.assertEqual(self.run_cli("phantom", "--kind", "teapot"), 2)

    def test_simulate_without_noise_or_truncation(self):
        self.run_cli("phantom")
        code = self.run_cli("simulate", "--image", self.path("phantom.ctdl"), "--ratio", "0", "--i0", "inf")
        self.assertEqual(code, 0)
        self.assertEqual(self.read_bytes("sim_p.ctdl"), self.read_bytes("sim_y.ctdl"))
        self.assertTrue(np.all(read_container(self.path("sim_T.ctdl")) == 1))
        self.assertEqual(self.run_cli("simulate", "--image", self.path("missing.ctdl")), 2)

    def test_recon_fbp_matches_library(self):
        self.run_cli("phantom")
        self.run_cli("simulate", "--image", self.path("phantom.ctdl"), "--ratio", "0.58", "--i0", "1e6", "--seed", "1")
        code = self.run_cli(
            "recon", "--method", "fbp", "--sino", self.path("sim_p.ctdl"), "--mask", self.path("sim_T.ctdl"),
            "--reference", self.path("phantom.ctdl"),
        )
        self.assertEqual(code, 0)
        cfg = ExperimentConfig({"geom.scale": "0.0625"})
        expected = fbp(Sinogram(cfg.geometry(), read_container(self.path("sim_p.ctdl"))), cfg.grid())
        np.testing.assert_array_equal(read_container(self.path("recon_fbp.ctdl")), expected.values)
        metrics = pd.read_csv(self.path("recon_fbp_metrics.csv"))
        self.assertEqual(list(metrics["region"]), ["full", "roi", "body_roi"])

        code = self.run_cli("recon", "--method", "model", "--sino", self.path("sim_p.ctdl"), "--mask", self.path("sim_T.ctdl"))
        self.assertEqual(code, 2)

    def test_recon_tv(self):
        self.run_cli("phantom")
        self.run_cli("simulate", "--image", self.path("phantom.ctdl"), "--ratio", "0.4", "--i0", "inf")
        code = self.run_cli(
            "recon", "--method", "tv", "--set", "tv.iters=3",
            "--sino", self.path("sim_p.ctdl"), "--mask", self.path("sim_T.ctdl"),
        )
        self.assertEqual(code, 0)
        self.assertTrue(np.all(read_container(self.path("recon_tv.ctdl")) >= 0))

    def test_bad_config(self):
        self.assertEqual(self.run_cli("phantom", "--set", "train.speed=1"), 2)
        self.assertEqual(main(["phantom", "--config", self.path("absent.cfg")]), 2)


class TestRender(CliTestCase):
    def test_window(self):
        hu = np.array([-1000.0, -150.0, 400.0, 1000.0, 125.0])
        np.testing.assert_array_equal(render_window(hu, -150.0, 400.0)[:4], [0, 0, 255, 255])
        self.assertIn(render_window(hu, -150.0, 400.0)[4], (127, 128))
        np.testing.assert_allclose(to_hounsfield(np.array([WATER_MU_PER_MM, 0.0])), [0.0, -1000.0])
        with self.assertRaises(ConfigurationError):
            render_window(hu, 400.0, -150.0)

    def test_png(self):
        hu = np.full((8, 8), -150.0)
        hu[:4] = 400.0
        write_container(self.path("img.ctdl"), (WATER_MU_PER_MM * (1.0 + hu / 1000.0)).astype(np.float32))
        self.assertEqual(self.run_cli("render", "--image", self.path("img.ctdl")), 0)
        with PilImage.open(self.path("img.png")) as png:
            pixels = np.asarray(png)
            self.assertEqual(png.text["window_hu"], "-150,400")
            self.assertEqual(png.text["source"], "img.ctdl")
        self.assertTrue(np.all(pixels[:4] == 255))
        self.assertTrue(np.all(pixels[4:] == 0))
        self.assertEqual(self.run_cli("render", "--image", self.path("img.ctdl"), "--low", "10", "--high", "10"), 2)

    def test_write_failure_is_a_usage_error(self):
        write_container(self.path("img.ctdl"), np.full((8, 8), WATER_MU_PER_MM, dtype=np.float32))
        os.makedirs(self.path("blocked.png"))
        clear_messages()
        self.assertEqual(self.run_cli("render", "--image", self.path("img.ctdl"), "--out", "blocked.png"), 2)
        errors = [m for m in messages if m[1] == "dualct.cli" and m[2] == "ERROR"]
        self.assertEqual(len(errors), 1)
        self.assertIn("render", errors[0][3])


class TestExperimentCommands(CliTestCase):
    def test_empty_test_set(self):
        self.assertEqual(self.run_cli("eval", "--set", "sim.test_phantoms=0"), 2)

    def test_diagnose_arguments(self):
        self.assertEqual(self.run_cli("diagnose"), 2)
        self.assertEqual(self.run_cli("diagnose", "--set", "sim.test_phantoms=1", "--checkpoint", self.path("none.ctdl")), 2)
        self.assertEqual(self.run_cli("diagnose", "--synthetic", "--trials", "2"), 0)
        ranks = pd.read_csv(self.path("rank_experiment.csv"))
        self.assertEqual(list(ranks["signal"]), ["cupping", "noise", "coupled"])

    def test_train_resume_eval_diagnose(self):
        self.assertEqual(self.run_cli("train", *TINY_TRAIN), 0)
        curves = pd.read_csv(self.path("image-unet_loss.csv"))
        self.assertEqual(list(curves.columns), ["epoch", "train", "val"])
        self.assertEqual(list(curves["epoch"]), [1, 2])
        self.assertTrue(os.path.exists(self.path("checkpoints", "image-unet", "epoch_0002.ctdl")))

        self.assertEqual(self.run_cli("train", *TINY_TRAIN, "--set", "train.epochs=3", "--resume"), 0)
        curves = pd.read_csv(self.path("image-unet_loss.csv"))
        self.assertEqual(list(curves["epoch"]), [1, 2, 3])

        checkpoint = self.path("image-unet.ctdl")
        self.assertEqual(self.run_cli("eval", *TINY_TRAIN, "--checkpoint", checkpoint), 0)
        table = pd.read_csv(self.path("eval.csv"))
        self.assertEqual(len(table), 6)
        self.assertEqual(set(table["method"]), {"fbp", "extrapolate-fbp", "model:image-unet"})
        self.assertIn("nmse_roi", table.columns)
        self.assertEqual((table["sample"] == "mean").sum(), 3)

        self.assertEqual(self.run_cli("diagnose", *TINY_TRAIN, "--checkpoint", checkpoint), 0)
        spectra = pd.read_csv(self.path("spectra.csv"), index_col="k")
        self.assertEqual(list(spectra.columns), ["image-unet"])
        self.assertEqual(len(spectra), 64)
        self.assertAlmostEqual(spectra["image-unet"].iloc[0], 1.0)

    def test_training_is_reproducible(self):
        with tempfile.TemporaryDirectory() as other:
            self.assertEqual(self.run_cli("train", *TINY_TRAIN), 0)
            self.assertEqual(self.run_cli("train", *TINY_TRAIN, out=other), 0)
            with open(os.path.join(other, "image-unet.ctdl"), "rb") as f:
                self.assertEqual(f.read(), self.read_bytes("image-unet.ctdl"))
