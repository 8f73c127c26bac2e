"""
The four network arrangements and the model container that binds them to a
scan geometry.

Networks run on normalized data: every field is multiplied by
`data_scale` (1 / max |f| over the training set); the projection network
additionally sees its input multiplied by `sino_scale` and divides its
outputs by it. Sinograms are reflect-padded at the bottom/right up to the
network's size multiple and cropped back after it.
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Optional

import numpy as np

from ..dualct_error import ConfigurationError
from ..geometry import FanBeamGeometry, ImageGrid
from ..nn.layers import crop
from ..nn.network import NetworkGraph, attach_bridge, build_backbone, forward
from ..nn.tensor import Parameter, Tensor
from .fbp_layer import FbpLayer

IMAGE_HEAD = "image"
NOISE_HEAD = "noise"
EXTRA_HEAD = "extra"


class ArchitectureKind(str, Enum):
    IMAGE_UNET = "image-unet"
    PROJECTION_CNN = "projection-cnn"
    WNET = "wnet"
    DUALNET = "dualnet"

    @property
    def two_stage(self) -> bool:
        return self in (ArchitectureKind.WNET, ArchitectureKind.DUALNET)

    @property
    def projection_first(self) -> bool:
        return self in (ArchitectureKind.PROJECTION_CNN, ArchitectureKind.DUALNET)

    @property
    def width_factor(self) -> int:
        # single image network gets twice the channels of each two-stage network
        return 2 if self == ArchitectureKind.IMAGE_UNET else 1

    @classmethod
    def parse(cls, text: str) -> "ArchitectureKind":
        for kind in cls:
            if kind.value == text or kind.name.lower() == text.lower():
                return kind
        raise ConfigurationError(f"Unknown architecture '{text}', expected one of {', '.join(k.value for k in cls)}")


@dataclass
class TrainedModel:
    arch: ArchitectureKind
    stage1: NetworkGraph
    stage2: Optional[NetworkGraph]
    geom: FanBeamGeometry
    grid: ImageGrid
    data_scale: float = 1.0
    sino_scale: float = 1.0
    window: str = "ram-lak"
    manifest: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.arch.two_stage != (self.stage2 is not None):
            raise ConfigurationError(f"{self.arch.value} {'needs' if self.arch.two_stage else 'has no'} second stage")
        self._fbp_layer = FbpLayer(self.geom, self.grid, self.window)

    @property
    def fbp_layer(self) -> FbpLayer:
        return self._fbp_layer

    def stages(self):
        return [self.stage1] if self.stage2 is None else [self.stage1, self.stage2]

    def parameters(self) -> Dict[str, Parameter]:
        params = {f"stage1.{name}": p for name, p in self.stage1.params.items()}
        if self.stage2 is not None:
            params.update({f"stage2.{name}": p for name, p in self.stage2.params.items()})
        return params

    def zero_grad(self):
        for net in self.stages():
            net.zero_grad()


def _image_net(base_channels, depth, rng, dtype) -> NetworkGraph:
    return attach_bridge(build_backbone(base_channels, depth, 1, rng, dtype), 1, IMAGE_HEAD)


def _projection_net(base_channels, depth, rng, dtype) -> NetworkGraph:
    net = build_backbone(base_channels, depth, 1, rng, dtype)
    attach_bridge(net, 1, NOISE_HEAD)
    return attach_bridge(net, 1, EXTRA_HEAD)


def build_model(arch: ArchitectureKind, geom: FanBeamGeometry, grid: ImageGrid, base_channels: int = 8, depth: int = 3,
                rng=None, dtype=np.float32, window: str = "ram-lak") -> TrainedModel:
    rng = rng if rng is not None else np.random.default_rng(0)
    multiple = 2 ** (depth - 1)
    if grid.nx % multiple or grid.ny % multiple:
        raise ConfigurationError(f"Grid {grid.nx}x{grid.ny} is not divisible by {multiple} for depth {depth}")
    try:
        geom.check_covers(grid)
    except Exception as e:
        raise ConfigurationError("Model geometry does not cover its grid", e)
    width = base_channels * arch.width_factor
    first = _projection_net if arch.projection_first else _image_net
    stage1 = first(width, depth, rng, dtype)
    stage2 = _image_net(width, depth, rng, dtype) if arch.two_stage else None
    return TrainedModel(arch=arch, stage1=stage1, stage2=stage2, geom=geom, grid=grid, window=window)


def pad_to_multiple(values: np.ndarray, multiple: int) -> np.ndarray:
    """Reflect-pads the last two axes at the far end."""
    h, w = values.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if not ph and not pw:
        return values
    widths = [(0, 0)] * (values.ndim - 2) + [(0, ph), (0, pw)]
    mode = "reflect" if ph < h and pw < w else "edge"
    return np.pad(values, widths, mode=mode)


def apply_image_net(net: NetworkGraph, q, mode: str = "train") -> Tensor:
    if not isinstance(q, Tensor):
        q = Tensor(np.asarray(q, dtype=net.dtype), requires_grad=False)
    return forward(net, q, mode, heads=[IMAGE_HEAD])[IMAGE_HEAD]


def apply_projection_net(model: TrainedModel, p_scaled: np.ndarray, mode: str = "train"):
    """Noise and extrapolation heads for an already data-scaled sinogram batch."""
    net = model.stage1
    n_views, n_dets = model.geom.shape
    x = pad_to_multiple(np.asarray(p_scaled, dtype=net.dtype) * model.sino_scale, net.size_multiple)
    outputs = forward(net, Tensor(x, requires_grad=False), mode, heads=[NOISE_HEAD, EXTRA_HEAD])
    inverse = 1.0 / model.sino_scale
    h_hat = crop(outputs[NOISE_HEAD], n_views, n_dets) * inverse
    z_hat = crop(outputs[EXTRA_HEAD], n_views, n_dets) * inverse
    return h_hat, z_hat
