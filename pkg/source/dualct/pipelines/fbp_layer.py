"""
FBP as a differentiable node: forward is projector.fbp per batch item,
backward is its exact adjoint (weighted forward projection then the
transposed filter).
"""
import numpy as np

from ..dualct_error import ShapeError
from ..geometry import FanBeamGeometry, ImageGrid
from ..nn.tensor import Tensor
from ..projector import Image, Sinogram, fbp, fbp_adjoint


def _check_batch(values: np.ndarray, shape, what: str):
    if values.ndim != 4 or values.shape[1] != 1 or values.shape[2:] != tuple(shape):
        raise ShapeError(f"{what} must be (N, 1, {shape[0]}, {shape[1]}), got {values.shape}")


class FbpLayer:
    def __init__(self, geom: FanBeamGeometry, grid: ImageGrid, window: str = "ram-lak", workers=None):
        self.geom = geom
        self.grid = grid
        self.window = window
        self.workers = workers

    def forward_values(self, sino: np.ndarray) -> np.ndarray:
        _check_batch(sino, self.geom.shape, "FBP layer input")
        images = [fbp(Sinogram(self.geom, s[0]), self.grid, self.window, self.workers).values for s in sino]
        return np.stack(images)[:, None]

    def backward_values(self, grad_image: np.ndarray) -> np.ndarray:
        _check_batch(grad_image, self.grid.shape, "FBP layer gradient")
        sinos = [fbp_adjoint(Image(self.grid, g[0]), self.geom, self.window, self.workers).values for g in grad_image]
        return np.stack(sinos)[:, None]

    def __call__(self, sino: Tensor) -> Tensor:
        return fbp_layer_forward(self, sino)


def fbp_layer_forward(layer: FbpLayer, sino: Tensor) -> Tensor:
    if not isinstance(sino, Tensor):
        sino = Tensor(sino, requires_grad=False)
    out = layer.forward_values(sino.values)
    return Tensor(out, (sino,), lambda g: (fbp_layer_backward(layer, g),))


def fbp_layer_backward(layer: FbpLayer, grad_image: np.ndarray) -> np.ndarray:
    return layer.backward_values(np.asarray(grad_image)).astype(grad_image.dtype, copy=False)
