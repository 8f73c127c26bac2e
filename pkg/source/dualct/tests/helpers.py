import os

import numpy as np

from dualct.geometry import FanBeamGeometry, ImageGrid, scaled_geometry, scaled_grid
from dualct.nn.tensor import Tensor

SLOW_TESTS = os.environ.get("DUALCT_SLOW_TESTS", "0") not in ("0", "false", "False", "")

# 32x32 at 16 mm, 45 views x 90 detectors
TINY_SCALE = 0.0625


def tiny_grid() -> ImageGrid:
    return scaled_grid(TINY_SCALE)


def tiny_geometry() -> FanBeamGeometry:
    return scaled_geometry(TINY_SCALE)


def small_pair(n=16, views=12, dets=40):
    """Coarse but valid geometry for fast exactness checks."""
    grid = ImageGrid(n, n, 512.0 / n)
    geom = FanBeamGeometry(n_views=views, n_dets=dets, det_pitch_mm=1440.0 / dets, sod_mm=1000.0, sdd_mm=1500.0)
    return grid, geom


def numeric_gradient(fn, x: np.ndarray, indices, eps=1e-6):
    grads = []
    for index in indices:
        old = x[index]
        x[index] = old + eps
        up = fn()
        x[index] = old - eps
        down = fn()
        x[index] = old
        grads.append((up - down) / (2 * eps))
    return np.array(grads)


def check_gradient(test, build_loss, leaf: Tensor, n_checks=12, rtol=1e-3, seed=0):
    """Compares leaf.grad from backward() against central differences at random entries."""
    from dualct.nn.tensor import backward

    leaf.zero_grad()
    loss = build_loss()
    backward(loss)
    analytic = leaf.grad
    test.assertIsNotNone(analytic)
    rng = np.random.default_rng(seed)
    flat = [tuple(int(i) for i in np.unravel_index(k, leaf.shape)) for k in rng.choice(leaf.values.size, size=min(n_checks, leaf.values.size), replace=False)]
    numeric = numeric_gradient(lambda: float(build_loss().values), leaf.values, flat)
    picked = np.array([analytic[i] for i in flat])
    scale = max(np.max(np.abs(numeric)), np.max(np.abs(picked)), 1e-12)
    test.assertLessEqual(np.max(np.abs(numeric - picked)) / scale, rtol)
