"""
Scan geometry, reconstruction lattice and the truncation / ROI masks.

Coordinates: the rotation isocenter is the origin, x grows to the right and y
grows upward. Image arrays are indexed [row, col] with row 0 at the top, so
an array of shape (ny, nx) is displayed in physical orientation.

The source for view angle beta sits at sod * (cos beta, sin beta). The flat,
equispaced detector is perpendicular to the central ray at distance
sdd - sod behind the isocenter; detector coordinate u runs along
(-sin beta, cos beta).
"""
import math
from dataclasses import dataclass

import numpy as np

from .dualct_error import DomainError

STANDARD_VIEWS = 720
STANDARD_DETS = 1440
STANDARD_PITCH_MM = 1.0
STANDARD_SOD_MM = 1000.0
STANDARD_SDD_MM = 1500.0
STANDARD_GRID = 512
STANDARD_PIXEL_MM = 1.0


def round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def _read_only(values: np.ndarray) -> np.ndarray:
    values = np.ascontiguousarray(values)
    values.setflags(write=False)
    return values


@dataclass(frozen=True)
class ImageGrid:
    nx: int
    ny: int
    pixel_size_mm: float

    def __post_init__(self):
        if self.nx < 8 or self.ny < 8:
            raise DomainError(f"Image grid must be at least 8x8, got {self.nx}x{self.ny}")
        if not self.pixel_size_mm > 0:
            raise DomainError(f"Pixel size must be positive, got {self.pixel_size_mm}")

    @property
    def shape(self):
        return (self.ny, self.nx)

    @property
    def half_width_mm(self) -> float:
        return self.nx * self.pixel_size_mm / 2.0

    @property
    def half_height_mm(self) -> float:
        return self.ny * self.pixel_size_mm / 2.0

    @property
    def inscribed_radius_mm(self) -> float:
        return min(self.nx, self.ny) * self.pixel_size_mm / 2.0

    def pixel_centers(self):
        """Physical (x, y) of every pixel center, each of shape (ny, nx)."""
        cols = (np.arange(self.nx) - (self.nx - 1) / 2.0) * self.pixel_size_mm
        rows = ((self.ny - 1) / 2.0 - np.arange(self.ny)) * self.pixel_size_mm
        return np.meshgrid(cols, rows)

    def radius_map(self) -> np.ndarray:
        x, y = self.pixel_centers()
        return np.hypot(x, y)


@dataclass(frozen=True)
class FanBeamGeometry:
    n_views: int
    n_dets: int
    det_pitch_mm: float
    sod_mm: float
    sdd_mm: float
    angle_start_rad: float = 0.0
    angle_extent_rad: float = 2.0 * math.pi

    def __post_init__(self):
        if self.n_views < 1:
            raise DomainError(f"Need at least one view, got {self.n_views}")
        if self.n_dets < 2:
            raise DomainError(f"Need at least two detectors, got {self.n_dets}")
        if not self.det_pitch_mm > 0:
            raise DomainError(f"Detector pitch must be positive, got {self.det_pitch_mm}")
        if not (self.sdd_mm > self.sod_mm > 0):
            raise DomainError(f"Require sdd > sod > 0, got sod={self.sod_mm} sdd={self.sdd_mm}")
        if not self.angle_extent_rad > 0:
            raise DomainError(f"Angular extent must be positive, got {self.angle_extent_rad}")

    @property
    def shape(self):
        return (self.n_views, self.n_dets)

    @property
    def delta_beta(self) -> float:
        return self.angle_extent_rad / self.n_views

    @property
    def is_full_scan(self) -> bool:
        return math.isclose(self.angle_extent_rad, 2.0 * math.pi, rel_tol=1e-12)

    def angles(self) -> np.ndarray:
        return self.angle_start_rad + np.arange(self.n_views) * self.delta_beta

    def detector_positions(self) -> np.ndarray:
        """Detector bin centers u_k in mm on the physical detector."""
        return (np.arange(self.n_dets) - (self.n_dets - 1) / 2.0) * self.det_pitch_mm

    @property
    def detector_half_width_mm(self) -> float:
        return self.n_dets * self.det_pitch_mm / 2.0

    @property
    def fan_half_angle(self) -> float:
        return math.atan(self.detector_half_width_mm / self.sdd_mm)

    @property
    def fov_radius_mm(self) -> float:
        return self.sod_mm * math.sin(self.fan_half_angle)

    def check_covers(self, grid: ImageGrid):
        """The full-detector field of view must contain the grid's inscribed circle."""
        if grid.inscribed_radius_mm > self.fov_radius_mm * (1.0 + 1e-12):
            raise DomainError(
                f"Grid inscribed radius {grid.inscribed_radius_mm:.3f} mm exceeds the "
                f"field of view radius {self.fov_radius_mm:.3f} mm"
            )


def fov_radius_mm(geom: FanBeamGeometry) -> float:
    return geom.fov_radius_mm


def standard_geometry() -> FanBeamGeometry:
    return FanBeamGeometry(
        n_views=STANDARD_VIEWS,
        n_dets=STANDARD_DETS,
        det_pitch_mm=STANDARD_PITCH_MM,
        sod_mm=STANDARD_SOD_MM,
        sdd_mm=STANDARD_SDD_MM,
    )


def standard_grid() -> ImageGrid:
    return ImageGrid(STANDARD_GRID, STANDARD_GRID, STANDARD_PIXEL_MM)


def _check_scale(scale: float):
    if not (0.0 < scale <= 1.0):
        raise DomainError(f"Scale must lie in (0, 1], got {scale}")
    if round_half_up(STANDARD_VIEWS * scale) < 8:
        raise DomainError(f"Scale {scale} leaves fewer than 8 views")


def scaled_geometry(scale: float) -> FanBeamGeometry:
    """Shrinks view and detector counts while keeping the fan angle."""
    _check_scale(scale)
    n_views = round_half_up(STANDARD_VIEWS * scale)
    n_dets = round_half_up(STANDARD_DETS * scale)
    # same physical detector width => same fan half angle
    pitch = STANDARD_DETS * STANDARD_PITCH_MM / n_dets
    return FanBeamGeometry(
        n_views=n_views,
        n_dets=n_dets,
        det_pitch_mm=pitch,
        sod_mm=STANDARD_SOD_MM,
        sdd_mm=STANDARD_SDD_MM,
    )


def scaled_grid(scale: float) -> ImageGrid:
    _check_scale(scale)
    n = round_half_up(STANDARD_GRID * scale)
    return ImageGrid(n, n, STANDARD_GRID * STANDARD_PIXEL_MM / n)


@dataclass(frozen=True, eq=False)
class ProjectionMask:
    """Binary truncation mask over (n_views, n_dets); every row keeps the same centered span."""

    values: np.ndarray
    kept: int
    start: int
    ratio: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "values", _read_only(np.asarray(self.values, dtype=np.float32)))
        if self.values.ndim != 2:
            raise DomainError(f"Projection mask must be 2-D, got shape {self.values.shape}")
        if not np.all((self.values == 0) | (self.values == 1)):
            raise DomainError("Projection mask values must be 0 or 1")
        if not np.all(self.values == self.values[0]):
            raise DomainError("Every view of a projection mask must keep the same detectors")

    @classmethod
    def from_values(cls, values, ratio=None):
        """Rebuilds a mask read back from disk; the kept span is taken from the first view."""
        values = np.asarray(values, dtype=np.float32)
        if values.ndim != 2:
            raise DomainError(f"Projection mask must be 2-D, got shape {values.shape}")
        kept_idx = np.flatnonzero(values[0] == 1)
        if kept_idx.size < 2 or kept_idx[-1] - kept_idx[0] + 1 != kept_idx.size:
            raise DomainError("Projection mask must keep one contiguous span of at least two detectors")
        kept = int(kept_idx.size)
        if ratio is None:
            ratio = 1.0 - kept / values.shape[1]
        return cls(values=values, kept=kept, start=int(kept_idx[0]), ratio=float(ratio))

    @property
    def shape(self):
        return self.values.shape

    @property
    def stop(self) -> int:
        return self.start + self.kept

    def complement(self) -> np.ndarray:
        return 1.0 - self.values

    def matches(self, geom: FanBeamGeometry) -> bool:
        return self.values.shape == geom.shape


@dataclass(frozen=True, eq=False)
class ImageMask:
    """Centered binary ROI disc of radius mu_mm."""

    values: np.ndarray
    mu_mm: float

    def __post_init__(self):
        object.__setattr__(self, "values", _read_only(np.asarray(self.values, dtype=np.float32)))
        if not self.mu_mm > 0:
            raise DomainError(f"ROI radius must be positive, got {self.mu_mm}")
        if not np.all((self.values == 0) | (self.values == 1)):
            raise DomainError("Image mask values must be 0 or 1")

    @property
    def shape(self):
        return self.values.shape


def kept_detector_count(n_dets: int, ratio: float) -> int:
    if not (0.0 <= ratio < 1.0):
        raise DomainError(f"Truncation ratio must lie in [0, 1), got {ratio}")
    kept = round_half_up(n_dets * (1.0 - ratio))
    if kept % 2 != n_dets % 2:
        kept -= 1
    if kept < 2:
        raise DomainError(f"Truncation ratio {ratio} keeps {kept} of {n_dets} detectors")
    return kept


def truncation_mask(geom: FanBeamGeometry, ratio: float) -> ProjectionMask:
    kept = kept_detector_count(geom.n_dets, ratio)
    start = (geom.n_dets - kept) // 2
    row = np.zeros(geom.n_dets, dtype=np.float32)
    row[start:start + kept] = 1.0
    values = np.broadcast_to(row, geom.shape)
    return ProjectionMask(values=values, kept=kept, start=start, ratio=float(ratio))


def roi_radius_mm(geom: FanBeamGeometry, kept: int) -> float:
    half_width = kept * geom.det_pitch_mm / 2.0
    return geom.sod_mm * math.sin(math.atan(half_width / geom.sdd_mm))


def roi_mask(grid: ImageGrid, geom: FanBeamGeometry, mask: ProjectionMask) -> ImageMask:
    if not mask.matches(geom):
        raise DomainError(f"Projection mask shape {mask.shape} does not match geometry {geom.shape}")
    mu = roi_radius_mm(geom, mask.kept)
    values = (grid.radius_map() < mu).astype(np.float32)
    return ImageMask(values=values, mu_mm=mu)

