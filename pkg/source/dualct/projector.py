"""
Fan-beam X-ray transform, its adjoint, ramp filtering and FBP.

Rays are marched from the source with a fixed step of half a pixel and the
image is sampled with bilinear interpolation. The backprojector is the exact
transpose of that sampling, so the pair passes dot-product tests to rounding
error. FBP reuses the same transposed sampling with a per-sample 1/L weight
(L = distance from the source), which together with the ray density at the
sample point reproduces the inverse-square weighting of flat-detector fan
beam FBP.

All arithmetic runs in float64; results are cast back to the dtype of the
input field (float32 unless the caller passes float64).
"""
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.fft

from .dualct_error import DomainError, ShapeError
from .geometry import FanBeamGeometry, ImageGrid
from .messages import get_logger

PROJECTOR_THREADS = int(os.environ.get("DUALCT_THREADS", "1"))
VIEWS_PER_CHUNK = 8

logger = get_logger("projector")


class Role(str, Enum):
    GROUND_TRUTH = "ground_truth"
    FBP = "fbp"
    NOISE = "noise"
    CUPPING = "cupping"
    GENERIC = "generic"


def _as_field(values) -> np.ndarray:
    values = np.asarray(values)
    if values.dtype != np.float64:
        values = values.astype(np.float32)
    return values


@dataclass(frozen=True, eq=False)
class Image:
    grid: ImageGrid
    values: np.ndarray
    role: Role = Role.GENERIC

    def __post_init__(self):
        object.__setattr__(self, "values", _as_field(self.values))
        if self.values.shape != self.grid.shape:
            raise ShapeError(f"Image values {self.values.shape} do not match grid {self.grid.shape}")
        if not np.all(np.isfinite(self.values)):
            raise DomainError("Image values must be finite")

    def with_values(self, values, role=None):
        return Image(self.grid, values, self.role if role is None else role)


@dataclass(frozen=True, eq=False)
class Sinogram:
    geom: FanBeamGeometry
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _as_field(self.values))
        if self.values.shape != self.geom.shape:
            raise ShapeError(f"Sinogram values {self.values.shape} do not match geometry {self.geom.shape}")
        if not np.all(np.isfinite(self.values)):
            raise DomainError("Sinogram values must be finite")

    def with_values(self, values):
        return Sinogram(self.geom, values)


@dataclass(frozen=True)
class _ViewSamples:
    ray: np.ndarray  # (S,) detector index of each sample
    pixel: np.ndarray  # (S, 4) flat pixel index of the bilinear neighbours
    weight: np.ndarray  # (S, 4) bilinear weight times the marching step
    path_mm: np.ndarray  # (S,) distance from the source


def _march_view(geom: FanBeamGeometry, grid: ImageGrid, beta: float) -> _ViewSamples:
    ps = grid.pixel_size_mm
    step = ps / 2.0
    reach = math.hypot(grid.half_width_mm, grid.half_height_mm) + ps
    n_steps = 2 * int(math.ceil(reach / step)) + 1
    offsets = (np.arange(n_steps) - (n_steps - 1) / 2.0) * step

    cos_b, sin_b = math.cos(beta), math.sin(beta)
    src = np.array([geom.sod_mm * cos_b, geom.sod_mm * sin_b])
    u = geom.detector_positions()
    det_x = -(geom.sdd_mm - geom.sod_mm) * cos_b - u * sin_b
    det_y = -(geom.sdd_mm - geom.sod_mm) * sin_b + u * cos_b
    dx, dy = det_x - src[0], det_y - src[1]
    length = np.hypot(dx, dy)
    dx, dy = dx / length, dy / length
    # closest approach of each ray to the isocenter
    t0 = -(src[0] * dx + src[1] * dy)

    t = t0[:, None] + offsets[None, :]
    x = src[0] + t * dx[:, None]
    y = src[1] + t * dy[:, None]
    col = x / ps + (grid.nx - 1) / 2.0
    row = (grid.ny - 1) / 2.0 - y / ps
    j0 = np.floor(col)
    i0 = np.floor(row)
    inside = (i0 >= -1) & (i0 < grid.ny) & (j0 >= -1) & (j0 < grid.nx)

    ray = np.broadcast_to(np.arange(geom.n_dets)[:, None], t.shape)[inside]
    path = t[inside]
    fc = (col - j0)[inside]
    fr = (row - i0)[inside]
    i0 = i0[inside].astype(np.int64)
    j0 = j0[inside].astype(np.int64)

    rows = np.stack([i0, i0, i0 + 1, i0 + 1], axis=1)
    cols = np.stack([j0, j0 + 1, j0, j0 + 1], axis=1)
    weight = np.stack([(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc], axis=1) * step
    valid = (rows >= 0) & (rows < grid.ny) & (cols >= 0) & (cols < grid.nx)
    weight = np.where(valid, weight, 0.0)
    pixel = np.where(valid, rows * grid.nx + cols, 0)
    return _ViewSamples(ray=ray, pixel=pixel, weight=weight, path_mm=path)


def _sample_scale(samples: _ViewSamples, inverse_path: bool):
    if inverse_path:
        return 1.0 / samples.path_mm
    return None


def _view_chunks(n_views: int):
    return [range(start, min(start + VIEWS_PER_CHUNK, n_views)) for start in range(0, n_views, VIEWS_PER_CHUNK)]


def _map_chunks(fn, n_views: int, workers: int):
    chunks = _view_chunks(n_views)
    if workers <= 1 or len(chunks) == 1:
        return [fn(chunk) for chunk in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        # map keeps chunk order, so reductions below do not depend on scheduling
        return list(pool.map(fn, chunks))


def project_values(values: np.ndarray, geom: FanBeamGeometry, grid: ImageGrid, inverse_path=False, workers=None) -> np.ndarray:
    flat = np.asarray(values, dtype=np.float64).ravel()
    betas = geom.angles()

    def run(chunk):
        rows = np.zeros((len(chunk), geom.n_dets))
        for n, v in enumerate(chunk):
            samples = _march_view(geom, grid, betas[v])
            along = np.sum(flat[samples.pixel] * samples.weight, axis=1)
            scale = _sample_scale(samples, inverse_path)
            if scale is not None:
                along = along * scale
            rows[n] = np.bincount(samples.ray, weights=along, minlength=geom.n_dets)
        return rows

    parts = _map_chunks(run, geom.n_views, workers or PROJECTOR_THREADS)
    return np.concatenate(parts, axis=0)


def backproject_values(values: np.ndarray, geom: FanBeamGeometry, grid: ImageGrid, inverse_path=False, workers=None) -> np.ndarray:
    sino = np.asarray(values, dtype=np.float64)
    betas = geom.angles()
    n_pixels = grid.nx * grid.ny

    def run(chunk):
        partial = np.zeros(n_pixels)
        for v in chunk:
            samples = _march_view(geom, grid, betas[v])
            along = sino[v][samples.ray]
            scale = _sample_scale(samples, inverse_path)
            if scale is not None:
                along = along * scale
            partial += np.bincount(
                samples.pixel.ravel(),
                weights=(samples.weight * along[:, None]).ravel(),
                minlength=n_pixels,
            )
        return partial

    parts = _map_chunks(run, geom.n_views, workers or PROJECTOR_THREADS)
    image = np.zeros(n_pixels)
    for part in parts:
        image += part
    return image.reshape(grid.shape)


def _check_pair(geom: FanBeamGeometry, grid: ImageGrid):
    try:
        geom.check_covers(grid)
    except DomainError as e:
        raise DomainError("Geometry does not cover the image grid", e)


def forward_project(img: Image, geom: FanBeamGeometry, workers=None) -> Sinogram:
    _check_pair(geom, img.grid)
    values = project_values(img.values, geom, img.grid, workers=workers)
    return Sinogram(geom, values.astype(img.values.dtype))


def back_project(sino: Sinogram, grid: ImageGrid, workers=None) -> Image:
    _check_pair(sino.geom, grid)
    values = backproject_values(sino.values, sino.geom, grid, workers=workers)
    return Image(grid, values.astype(sino.values.dtype))


def ramp_kernel(n_dets: int, pitch_mm: float, window: str = "ram-lak"):
    """Real spectrum of the discrete Ram-Lak kernel on a zero padded length."""
    padded = 1 << int(math.ceil(math.log2(2 * n_dets)))
    k = np.arange(padded)
    offset = np.where(k <= padded // 2, k, k - padded)
    h = np.zeros(padded)
    h[0] = 1.0 / (4.0 * pitch_mm ** 2)
    odd = offset % 2 == 1
    h[odd] = -1.0 / (math.pi ** 2 * offset[odd].astype(np.float64) ** 2 * pitch_mm ** 2)
    spectrum = scipy.fft.rfft(h).real
    if window == "hann":
        freq = scipy.fft.rfftfreq(padded)
        spectrum = spectrum * 0.5 * (1.0 + np.cos(2.0 * math.pi * freq))
    elif window != "ram-lak":
        raise DomainError(f"Unknown ramp filter window: {window}")
    return padded, spectrum


def cosine_weights(geom: FanBeamGeometry) -> np.ndarray:
    u = geom.detector_positions()
    return geom.sdd_mm / np.sqrt(geom.sdd_mm ** 2 + u ** 2)


def _convolve_ramp(values: np.ndarray, geom: FanBeamGeometry, window: str) -> np.ndarray:
    padded, spectrum = ramp_kernel(geom.n_dets, geom.det_pitch_mm, window)
    transformed = scipy.fft.rfft(values, n=padded, axis=1)
    return scipy.fft.irfft(transformed * spectrum, n=padded, axis=1)[:, :geom.n_dets]


def ramp_filter(sino: Sinogram, window: str = "ram-lak") -> Sinogram:
    values = np.asarray(sino.values, dtype=np.float64) * cosine_weights(sino.geom)
    filtered = _convolve_ramp(values, sino.geom, window)
    return Sinogram(sino.geom, filtered.astype(sino.values.dtype))


def ramp_filter_adjoint(sino: Sinogram, window: str = "ram-lak") -> Sinogram:
    # the kernel is even, so only the cosine weighting changes side
    filtered = _convolve_ramp(np.asarray(sino.values, dtype=np.float64), sino.geom, window)
    filtered = filtered * cosine_weights(sino.geom)
    return Sinogram(sino.geom, filtered.astype(sino.values.dtype))


def fbp_scale(geom: FanBeamGeometry, grid: ImageGrid) -> float:
    # redundancy factor pi/extent is 1/2 for a full rotation
    redundancy = math.pi / geom.angle_extent_rad
    return redundancy * geom.delta_beta * geom.det_pitch_mm ** 2 * geom.sod_mm / grid.pixel_size_mm ** 2


def fbp(sino: Sinogram, grid: ImageGrid, window: str = "ram-lak", workers=None) -> Image:
    _check_pair(sino.geom, grid)
    filtered = ramp_filter(sino.with_values(np.asarray(sino.values, dtype=np.float64)), window)
    values = backproject_values(filtered.values, sino.geom, grid, inverse_path=True, workers=workers)
    values *= fbp_scale(sino.geom, grid)
    return Image(grid, values.astype(sino.values.dtype), Role.FBP)


def fbp_adjoint(img: Image, geom: FanBeamGeometry, window: str = "ram-lak", workers=None) -> Sinogram:
    """Exact adjoint of `fbp`: weighted projection followed by the transposed filter."""
    _check_pair(geom, img.grid)
    projected = project_values(img.values, geom, img.grid, inverse_path=True, workers=workers)
    projected *= fbp_scale(geom, img.grid)
    result = ramp_filter_adjoint(Sinogram(geom, projected), window)
    return Sinogram(geom, result.values.astype(img.values.dtype))
