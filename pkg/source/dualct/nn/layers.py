"""
Differentiable layers on (batch, channels, height, width) tensors.
"""
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..dualct_error import DomainError, ShapeError
from .tensor import Tensor

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1


def _check_4d(x: Tensor, op: str):
    if x.values.ndim != 4:
        raise ShapeError(f"{op} expects (N, C, H, W), got {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"{op} got an empty tensor {x.shape}")


def _windows(values: np.ndarray, k: int) -> np.ndarray:
    pad = k // 2
    if pad:
        values = np.pad(values, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    return sliding_window_view(values, (k, k), axis=(2, 3))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor = None) -> Tensor:
    """'Same' zero-padded cross-correlation with an odd square kernel."""
    _check_4d(x, "conv2d")
    out_ch, in_ch, kh, kw = weight.shape
    if in_ch != x.shape[1]:
        raise ShapeError(f"conv2d weight expects {in_ch} input channels, got {x.shape[1]}")
    if kh != kw or kh % 2 != 1:
        raise ShapeError(f"conv2d needs an odd square kernel, got {kh}x{kw}")
    if bias is not None and bias.shape != (out_ch,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match {out_ch} output channels")

    win = _windows(x.values, kh)
    out = np.tensordot(win, weight.values, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.values[None, :, None, None]

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            flipped = weight.values[:, :, ::-1, ::-1]
            gx = np.tensordot(_windows(g, kh), flipped, axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
        if weight.requires_grad:
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor(np.ascontiguousarray(out), parents, backward)


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPSILON

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    _check_4d(x, "batch_norm")
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(f"batch_norm parameters do not match {channels} channels")
    count = x.shape[0] * x.shape[2] * x.shape[3]
    if count == 0:
        raise DomainError("batch_norm needs a non-empty batch")
    bc = (None, slice(None), None, None)

    if mode == "train":
        mean = x.values.mean(axis=(0, 2, 3))
        var = x.values.var(axis=(0, 2, 3))
        unbiased = var * count / (count - 1) if count > 1 else var
        state.running_mean[...] = (1 - state.momentum) * state.running_mean + state.momentum * mean
        state.running_var[...] = (1 - state.momentum) * state.running_var + state.momentum * unbiased
    elif mode == "eval":
        mean, var = state.running_mean, state.running_var
    else:
        raise DomainError(f"Unknown batch_norm mode '{mode}'")

    inv_std = 1.0 / np.sqrt(var + state.eps)
    x_hat = (x.values - mean[bc]) * inv_std[bc]
    out = gamma.values[bc] * x_hat + beta.values[bc]

    def backward(g):
        g_gamma = np.sum(g * x_hat, axis=(0, 2, 3))
        g_beta = g.sum(axis=(0, 2, 3))
        if mode == "train":
            scale = (gamma.values * inv_std / count)[bc]
            gx = scale * (count * g - g_beta[bc] - x_hat * g_gamma[bc])
        else:
            gx = g * (gamma.values * inv_std)[bc]
        return gx, g_gamma, g_beta

    return Tensor(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    positive = x.values > 0
    return Tensor(np.where(positive, x.values, 0).astype(x.dtype), (x,), lambda g: (g * positive,))


def avg_pool2(x: Tensor) -> Tensor:
    _check_4d(x, "avg_pool2")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    out = x.values.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return Tensor(out, (x,), backward)


def unpool2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    _check_4d(x, "unpool2")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.values, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return Tensor(out, (x,), backward)


def concat_skip(a: Tensor, b: Tensor) -> Tensor:
    _check_4d(a, "concat_skip")
    _check_4d(b, "concat_skip")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"concat_skip needs equal N, H, W: {a.shape} vs {b.shape}")
    split = a.shape[1]

    def backward(g):
        return g[:, :split], g[:, split:]

    return Tensor(np.concatenate([a.values, b.values], axis=1), (a, b), backward)


def crop(x: Tensor, height: int, width: int) -> Tensor:
    """Keeps the top-left height x width window."""
    _check_4d(x, "crop")
    if height > x.shape[2] or width > x.shape[3]:
        raise ShapeError(f"Cannot crop {x.shape} to {height}x{width}")
    full = x.shape

    def backward(g):
        out = np.zeros(full, dtype=g.dtype)
        out[:, :, :height, :width] = g
        return (out,)

    return Tensor(np.ascontiguousarray(x.values[:, :, :height, :width]), (x,), backward)
