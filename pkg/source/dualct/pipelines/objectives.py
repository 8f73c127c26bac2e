"""
Training objectives for the four architectures.

Every term is a masked squared error. With reduction "mean" it is divided
by the number of masked entries (summed over the batch); "sum" leaves the
plain squared norm. Fields are (N, 1, H, W) arrays or Tensors, masks are
arrays broadcastable to them.
"""
from dataclasses import dataclass
from typing import Callable, Tuple

import numpy as np

from ..dualct_error import DomainError, ShapeError
from ..geometry import ProjectionMask
from ..nn.tensor import Tensor, detach, square, tensor_sum
from ..projector import Sinogram
from .fbp_layer import FbpLayer

REDUCTIONS = ("mean", "sum")


@dataclass(frozen=True)
class LossOptions:
    reduction: str = "mean"
    detach_h: bool = True
    barrier: bool = True

    def __post_init__(self):
        if self.reduction not in REDUCTIONS:
            raise DomainError(f"Unknown loss reduction '{self.reduction}'")


DEFAULT_OPTIONS = LossOptions()


def _tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=False)


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, Tensor) else np.asarray(x)


def masked_squared_error(diff: Tensor, mask, reduction: str = "mean") -> Tensor:
    mask = np.asarray(mask, dtype=diff.dtype)
    try:
        count = float(np.broadcast_to(mask, diff.shape).sum())
    except ValueError as e:
        raise ShapeError(f"Mask {mask.shape} does not broadcast to {diff.shape}", e)
    if count == 0:
        raise DomainError("Loss mask selects no entries")
    total = tensor_sum(square(diff * mask))
    if reduction == "sum":
        return total
    return total * (1.0 / count)


def compose_corrected_sinogram(p: Sinogram, h_hat: Sinogram, z_hat: Sinogram, T: ProjectionMask) -> Sinogram:
    """T*(p - h_hat) + (1 - T)*z_hat"""
    for s in (h_hat, z_hat):
        if s.values.shape != p.values.shape:
            raise ShapeError(f"Sinogram dims differ: {s.values.shape} vs {p.values.shape}")
    if T.shape != p.values.shape:
        raise ShapeError(f"Mask dims {T.shape} differ from sinogram {p.values.shape}")
    values = T.values * (p.values - h_hat.values) + T.complement() * z_hat.values
    return Sinogram(p.geom, values)


def compose_corrected(p, h_hat, z_hat, T) -> Tensor:
    """Tensor form of compose_corrected_sinogram; gradients reach h_hat and z_hat."""
    T = np.asarray(T)
    h_hat, z_hat = _tensor(h_hat), _tensor(z_hat)
    if h_hat.shape != _values(p).shape or z_hat.shape != _values(p).shape:
        raise ShapeError(f"Sinogram dims differ: p {_values(p).shape}, h {h_hat.shape}, z {z_hat.shape}")
    inside = (_tensor(p) - h_hat) * T.astype(h_hat.dtype)
    return inside + z_hat * (1.0 - T).astype(z_hat.dtype)


def loss_image_unet(q, f, I, net_out, options: LossOptions = DEFAULT_OPTIONS) -> Tensor:
    """Residual target I*(q - f) against I*net_out."""
    residual = _tensor(q) - _values(f)
    return masked_squared_error(residual - _tensor(net_out), I, options.reduction)


def projection_terms(p, y, f, T, I, h_hat, z_hat, fbp_layer: FbpLayer, options: LossOptions = DEFAULT_OPTIONS):
    """Returns (noise term, extrapolation term, corrected FBP image)."""
    h_hat, z_hat = _tensor(h_hat), _tensor(z_hat)
    noise = _values(p) - _values(y)
    term1 = masked_squared_error(_tensor(noise) - h_hat, T, options.reduction)
    h_used = detach(h_hat) if options.detach_h else h_hat
    q_bar = fbp_layer(compose_corrected(p, h_used, z_hat, T))
    term2 = masked_squared_error(_tensor(_values(f)) - q_bar, I, options.reduction)
    return term1, term2, q_bar


def loss_projection_unet(p, y, f, T, I, h_hat, z_hat, fbp_layer: FbpLayer, options: LossOptions = DEFAULT_OPTIONS) -> Tensor:
    term1, term2, _ = projection_terms(p, y, f, T, I, h_hat, z_hat, fbp_layer, options)
    return term1 + term2


def first_stage_image(q, stage1_out, I) -> Tensor:
    """Residual correction applied inside the ROI only."""
    return _tensor(q) - _tensor(stage1_out) * np.asarray(I, dtype=_values(q).dtype)


def loss_wnet(q, f, I, stage1: Callable[[Tensor], Tensor], stage2: Callable[[Tensor], Tensor],
              options: LossOptions = DEFAULT_OPTIONS) -> Tensor:
    q = _tensor(q)
    out1 = stage1(q)
    q_bar = first_stage_image(q, out1, I)
    if options.barrier:
        q_bar = detach(q_bar)
    out2 = stage2(q_bar)
    return loss_image_unet(q, f, I, out1, options) + loss_image_unet(q_bar, f, I, out2, options)


def loss_dualnet(p, y, f, T, I, stage1_heads: Tuple[Tensor, Tensor], stage2: Callable[[Tensor], Tensor],
                 fbp_layer: FbpLayer, options: LossOptions = DEFAULT_OPTIONS) -> Tensor:
    h_hat, z_hat = stage1_heads
    term1, term2, q_bar = projection_terms(p, y, f, T, I, h_hat, z_hat, fbp_layer, options)
    if options.barrier:
        q_bar = detach(q_bar)
    out2 = stage2(q_bar)
    return term1 + term2 + loss_image_unet(q_bar, f, I, out2, options)
