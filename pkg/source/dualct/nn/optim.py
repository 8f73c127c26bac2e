from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from ..dualct_error import ShapeError
from ..messages import get_logger

logger = get_logger("optim")


@dataclass
class OptimState:
    """Adam moments plus the plateau learning-rate schedule."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    best_val: float = float("inf")
    plateau_count: int = 0
    patience: int = 5
    factor: float = 0.1


def adam_step(params: Dict[str, "Parameter"], grads: Dict[str, np.ndarray], state: OptimState):
    """In-place bias-corrected Adam update of every parameter that has a gradient entry."""
    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        if grad.shape != param.shape:
            raise ShapeError(f"Gradient for {name} has shape {grad.shape}, parameter {param.shape}")
        m = state.m.setdefault(name, np.zeros_like(param.values, dtype=np.float64))
        v = state.v.setdefault(name, np.zeros_like(param.values, dtype=np.float64))
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(grad, dtype=np.float64)
        m_hat = m / correction1
        v_hat = v / correction2
        param.values -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.dtype)


def report_validation(state: OptimState, val_loss: float) -> bool:
    """Multiplies lr by `factor` after `patience` reports without improvement; returns True when it did."""
    if val_loss < state.best_val:
        state.best_val = val_loss
        state.plateau_count = 0
        return False
    state.plateau_count += 1
    if state.plateau_count >= state.patience:
        state.lr *= state.factor
        state.plateau_count = 0
        logger.info(f"Validation loss plateaued at {state.best_val:.6g}; learning rate now {state.lr:.3g}")
        return True
    return False
