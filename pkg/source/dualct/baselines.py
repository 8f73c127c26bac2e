"""
Classical comparators: mirrored projection extrapolation and smoothed-TV
iterative reconstruction.
"""
import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .dualct_error import DivergenceError, DomainError, ShapeError
from .geometry import FanBeamGeometry, ImageGrid, ProjectionMask
from .messages import get_logger, progress
from .projector import Image, Role, Sinogram, backproject_values, fbp, project_values

logger = get_logger("baselines")

DIVERGENCE_PATIENCE = 10


def _rolloff(width: int) -> np.ndarray:
    """1 next to the measured span, 0 at the detector edge."""
    if width == 1:
        return np.zeros(1)
    d = np.arange(width)
    return np.cos(0.5 * math.pi * d / (width - 1))


def extrapolate_sinogram(p: Sinogram, T: ProjectionMask) -> Sinogram:
    if not T.matches(p.geom):
        raise ShapeError(f"Mask dims {T.shape} do not match sinogram {p.values.shape}")
    if not np.any(T.values[0]):
        raise DomainError("Truncation mask keeps no detectors")
    start, stop = T.start, T.stop
    left, right = start, p.geom.n_dets - stop
    if left == 0 and right == 0:
        return Sinogram(p.geom, p.values.copy())

    measured = np.asarray(p.values[:, start:stop], dtype=np.float64)
    # symmetric reflection about the span boundaries, repeated if the span is short
    filled = np.pad(measured, ((0, 0), (left, right)), mode="symmetric")
    if left:
        filled[:, :left] *= _rolloff(left)[::-1]
    if right:
        filled[:, stop:] *= _rolloff(right)
    filled[:, start:stop] = p.values[:, start:stop]
    return Sinogram(p.geom, filled.astype(p.values.dtype))


@dataclass
class TvConfig:
    lam: float = 1e-4
    n_iters: int = 100
    step: Optional[float] = None
    epsilon: float = 1e-6
    backtracking: bool = True
    nonnegative: bool = True

    def validate(self):
        if self.lam < 0:
            raise DomainError(f"TV weight must be non-negative, got {self.lam}")
        if self.n_iters < 1:
            raise DomainError(f"Need at least one TV iteration, got {self.n_iters}")
        if self.step is not None and not self.step > 0:
            raise DomainError(f"TV step must be positive, got {self.step}")
        if not self.epsilon > 0:
            raise DomainError(f"TV smoothing must be positive, got {self.epsilon}")


def _forward_diff(f: np.ndarray):
    gx = np.zeros_like(f)
    gy = np.zeros_like(f)
    gx[:, :-1] = f[:, 1:] - f[:, :-1]
    gy[:-1, :] = f[1:, :] - f[:-1, :]
    return gx, gy


def _forward_diff_adjoint(vx: np.ndarray, vy: np.ndarray) -> np.ndarray:
    out = np.zeros_like(vx)
    out[:, :-1] -= vx[:, :-1]
    out[:, 1:] += vx[:, :-1]
    out[:-1, :] -= vy[:-1, :]
    out[1:, :] += vy[:-1, :]
    return out


def tv_value(f: np.ndarray, epsilon: float) -> float:
    gx, gy = _forward_diff(f)
    return float(np.sum(np.sqrt(gx * gx + gy * gy + epsilon * epsilon)))


def tv_gradient(f: np.ndarray, epsilon: float) -> np.ndarray:
    gx, gy = _forward_diff(f)
    mag = np.sqrt(gx * gx + gy * gy + epsilon * epsilon)
    return _forward_diff_adjoint(gx / mag, gy / mag)


def estimate_lipschitz(geom: FanBeamGeometry, grid: ImageGrid, T: ProjectionMask, n_iter: int = 20, rng=None) -> float:
    """Power iteration for the largest eigenvalue of P^T T P."""
    rng = rng if rng is not None else np.random.default_rng(0)
    x = rng.standard_normal(grid.shape)
    x /= np.linalg.norm(x)
    value = 0.0
    for _ in range(n_iter):
        y = backproject_values(T.values * project_values(x, geom, grid), geom, grid)
        value = float(np.linalg.norm(y))
        if value == 0.0:
            return 0.0
        x = y / value
    return value


class _Objective:
    def __init__(self, p: Sinogram, T: ProjectionMask, grid: ImageGrid, cfg: TvConfig):
        self.geom = p.geom
        self.grid = grid
        self.cfg = cfg
        self.mask = np.asarray(T.values, dtype=np.float64)
        self.p = np.asarray(p.values, dtype=np.float64) * self.mask

    def residual(self, f):
        return self.mask * project_values(f, self.geom, self.grid) - self.p

    def value(self, f, residual=None) -> float:
        r = self.residual(f) if residual is None else residual
        total = 0.5 * float(np.sum(r * r))
        if self.cfg.lam:
            total += self.cfg.lam * tv_value(f, self.cfg.epsilon)
        return total

    def gradient(self, f, residual) -> np.ndarray:
        g = backproject_values(self.mask * residual, self.geom, self.grid)
        if self.cfg.lam:
            g += self.cfg.lam * tv_gradient(f, self.cfg.epsilon)
        return g


def tv_reconstruct(p: Sinogram, T: ProjectionMask, grid: ImageGrid, cfg: TvConfig = None,
                   history: Optional[List[float]] = None) -> Image:
    """
    Projected gradient descent on 0.5 |T (P f - p)|^2 + lam * TV_eps(f),
    started from FBP of the extrapolated sinogram. With backtracking the
    step is halved until the projected step gives sufficient decrease, so
    the objective never increases. Without it a run whose objective rises
    DIVERGENCE_PATIENCE times in a row raises DivergenceError.
    """
    cfg = cfg or TvConfig()
    cfg.validate()
    if not T.matches(p.geom):
        raise ShapeError(f"Mask dims {T.shape} do not match sinogram {p.values.shape}")
    objective = _Objective(p, T, grid, cfg)

    f = np.asarray(fbp(extrapolate_sinogram(p, T), grid).values, dtype=np.float64)
    if cfg.nonnegative:
        f = np.maximum(f, 0.0)

    step = cfg.step
    if step is None:
        lipschitz = estimate_lipschitz(p.geom, grid, T)
        step = 1.0 / lipschitz if lipschitz > 0 else 1.0
    max_step = step

    residual = objective.residual(f)
    value = objective.value(f, residual)
    if history is not None:
        history.append(value)
    rises = 0
    for _ in progress(range(cfg.n_iters), desc="tv"):
        grad = objective.gradient(f, residual)
        while True:
            candidate = f - step * grad
            if cfg.nonnegative:
                candidate = np.maximum(candidate, 0.0)
            cand_residual = objective.residual(candidate)
            cand_value = objective.value(candidate, cand_residual)
            if not cfg.backtracking:
                break
            delta = candidate - f
            bound = value + float(np.sum(grad * delta)) + float(np.sum(delta * delta)) / (2.0 * step)
            if cand_value <= bound or step < 1e-12 * max_step:
                break
            step *= 0.5

        if not math.isfinite(cand_value):
            raise DivergenceError("TV objective is no longer finite", partial=Image(grid, f, Role.GENERIC), history=history)
        rises = rises + 1 if cand_value > value else 0
        f, residual, value = candidate, cand_residual, cand_value
        if history is not None:
            history.append(value)
        if rises >= DIVERGENCE_PATIENCE:
            raise DivergenceError(
                f"TV objective increased {rises} iterations in a row",
                partial=Image(grid, f, Role.GENERIC),
                history=history,
            )
        if cfg.backtracking:
            step = min(2.0 * step, max_step)

    logger.info(f"TV finished after {cfg.n_iters} iterations, objective {value:.6g}")
    return Image(grid, f.astype(np.float32), Role.GENERIC)
