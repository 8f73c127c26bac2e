from typing import Optional

import numpy as np

from ..dualct_error import ConfigurationError, ShapeError
from ..geometry import ProjectionMask, roi_mask
from ..nn.network import FEATURES, forward
from ..nn.tensor import Tensor
from ..projector import Image, Role, Sinogram
from .architectures import TrainedModel, apply_image_net, apply_projection_net, pad_to_multiple
from .objectives import compose_corrected, first_stage_image


def _check_inputs(model: TrainedModel, p: Sinogram, T: ProjectionMask):
    if p.geom != model.geom:
        raise ShapeError(f"Sinogram geometry {p.geom} does not match the model's {model.geom}")
    if not T.matches(model.geom):
        raise ShapeError(f"Mask dims {T.shape} do not match geometry {model.geom.shape}")


def _first_stage(model: TrainedModel, p_scaled: np.ndarray, T: ProjectionMask, I: np.ndarray) -> Tensor:
    dtype = model.stage1.dtype
    if model.arch.projection_first:
        h_hat, z_hat = apply_projection_net(model, p_scaled, "eval")
        return model.fbp_layer(compose_corrected(p_scaled, h_hat, z_hat, T.values.astype(dtype)))
    q = model.fbp_layer.forward_values(p_scaled)
    return first_stage_image(q, apply_image_net(model.stage1, q, "eval"), I)


def reconstruct(model: TrainedModel, p: Sinogram, T: ProjectionMask, stages: Optional[int] = None) -> Image:
    """
    ROI image from a measured sinogram. `stages=1` stops after the first
    network of a two-stage model. Everything outside the ROI disc is zero.
    """
    _check_inputs(model, p, T)
    n_stages = 2 if model.arch.two_stage else 1
    stages = n_stages if stages is None else stages
    if stages not in (1, 2) or stages > n_stages:
        raise ConfigurationError(f"{model.arch.value} has {n_stages} stage(s), asked for {stages}")

    dtype = model.stage1.dtype
    I = roi_mask(model.grid, model.geom, T).values[None, None].astype(dtype)
    p_scaled = (p.values * model.data_scale).astype(dtype)[None, None]

    image = _first_stage(model, p_scaled, T, I)
    if stages == 2:
        image = first_stage_image(image, apply_image_net(model.stage2, image, "eval"), I)

    values = image.values[0, 0] * I[0, 0] / model.data_scale
    return Image(model.grid, values.astype(p.values.dtype), Role.GENERIC)


def stage_features(model: TrainedModel, p: Sinogram, T: ProjectionMask, stage: int = 1) -> np.ndarray:
    """Last backbone feature maps (C, H, W) of one stage for the given measurement."""
    _check_inputs(model, p, T)
    if stage == 2 and model.stage2 is None:
        raise ConfigurationError(f"{model.arch.value} has no second stage")
    dtype = model.stage1.dtype
    p_scaled = (p.values * model.data_scale).astype(dtype)[None, None]

    if stage == 1 and model.arch.projection_first:
        x = pad_to_multiple(p_scaled * model.sino_scale, model.stage1.size_multiple)
        return forward(model.stage1, Tensor(x, requires_grad=False), "eval", heads=[])[FEATURES].values[0]

    if stage == 1:
        q = model.fbp_layer.forward_values(p_scaled)
        return forward(model.stage1, Tensor(q, requires_grad=False), "eval", heads=[])[FEATURES].values[0]

    # second stage sees the first stage's image
    I = roi_mask(model.grid, model.geom, T).values[None, None].astype(dtype)
    image = _first_stage(model, p_scaled, T, I)
    return forward(model.stage2, Tensor(image.values, requires_grad=False), "eval", heads=[])[FEATURES].values[0]
