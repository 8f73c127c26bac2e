"""
Phantoms, low-dose / truncated measurement simulation and dataset assembly.
"""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .container import read_container
from .dualct_error import ConfigurationError, DomainError
from .geometry import FanBeamGeometry, ImageGrid, ImageMask, ProjectionMask, roi_mask, truncation_mask
from .messages import get_logger, progress
from .projector import PROJECTOR_THREADS, Image, Role, Sinogram, forward_project

logger = get_logger("acquisition")

# water at ~70 keV in mm^-1; a phantom body intensity of 0.2 maps onto it
WATER_MU_PER_MM = 0.0192867
DEFAULT_ATTENUATION_SCALE = WATER_MU_PER_MM / 0.2

PHANTOM_KINDS = ("shepp-logan", "random-ellipses", "disc")
SPLITS = ("train", "val", "test")

# a fixed ratio or a (low, high) uniform range
TRUNCATION_SCHEDULE = (0.0, (0.0, 0.58), 0.58, (0.58, 0.74), 0.74, (0.74, 0.83), 0.83)


@dataclass(frozen=True)
class Ellipse:
    """Axes and center are fractions of the grid half extent; angle is counter-clockwise."""

    intensity: float
    a: float
    b: float
    x0: float = 0.0
    y0: float = 0.0
    phi_rad: float = 0.0


# modified (higher contrast) Shepp-Logan table, with the ventricle and lower
# pairs mirrored so the phantom is symmetric about the vertical axis
SHEPP_LOGAN_ELLIPSES = (
    Ellipse(1.0, 0.69, 0.92),
    Ellipse(-0.8, 0.6624, 0.8740, 0.0, -0.0184),
    Ellipse(-0.2, 0.1100, 0.3100, 0.22, 0.0, math.radians(-18.0)),
    Ellipse(-0.2, 0.1100, 0.3100, -0.22, 0.0, math.radians(18.0)),
    Ellipse(0.1, 0.2100, 0.2500, 0.0, 0.35),
    Ellipse(0.1, 0.0460, 0.0460, 0.0, 0.1),
    Ellipse(0.1, 0.0460, 0.0460, 0.0, -0.1),
    Ellipse(0.1, 0.0460, 0.0230, -0.08, -0.605),
    Ellipse(0.1, 0.0230, 0.0230, 0.0, -0.606),
    Ellipse(0.1, 0.0460, 0.0230, 0.08, -0.605),
)

BODY_ELLIPSE = Ellipse(0.2, 0.72, 0.86)


def _subpixel_coords(grid: ImageGrid, supersample: int):
    """Normalized coordinates of supersample x supersample points per pixel."""
    offsets = (np.arange(supersample) + 0.5) / supersample - 0.5
    x, y = grid.pixel_centers()
    xs = (x[..., None, None] + offsets[None, None, None, :] * grid.pixel_size_mm) / grid.half_width_mm
    ys = (y[..., None, None] - offsets[None, None, :, None] * grid.pixel_size_mm) / grid.half_height_mm
    return xs, ys


def _inside(ellipse: Ellipse, xs, ys):
    dx, dy = xs - ellipse.x0, ys - ellipse.y0
    c, s = math.cos(ellipse.phi_rad), math.sin(ellipse.phi_rad)
    xr = dx * c + dy * s
    yr = -dx * s + dy * c
    return (xr / ellipse.a) ** 2 + (yr / ellipse.b) ** 2 <= 1.0


def ellipse_phantom(grid: ImageGrid, ellipses: Sequence[Ellipse], supersample: int = 1, role=Role.GROUND_TRUTH) -> Image:
    xs, ys = _subpixel_coords(grid, supersample)
    total = np.zeros(xs.shape)
    for ellipse in ellipses:
        total += ellipse.intensity * _inside(ellipse, xs, ys)
    values = np.clip(total.mean(axis=(2, 3)), 0.0, 1.0)
    return Image(grid, values, role)


def shepp_logan(grid: ImageGrid) -> Image:
    return ellipse_phantom(grid, SHEPP_LOGAN_ELLIPSES)


def random_ellipse_phantom(grid: ImageGrid, rng, n_ellipses: int = 8) -> Image:
    if n_ellipses < 1:
        raise DomainError(f"Need at least one random ellipse, got {n_ellipses}")
    xs, ys = _subpixel_coords(grid, 1)
    body = _inside(BODY_ELLIPSE, xs, ys)
    total = BODY_ELLIPSE.intensity * body.astype(np.float64)
    for _ in range(n_ellipses):
        ellipse = Ellipse(
            intensity=rng.uniform(-0.3, 0.5),
            a=rng.uniform(0.03, 0.25),
            b=rng.uniform(0.03, 0.25),
            x0=rng.uniform(-0.6, 0.6) * BODY_ELLIPSE.a,
            y0=rng.uniform(-0.6, 0.6) * BODY_ELLIPSE.b,
            phi_rad=rng.uniform(0.0, math.pi),
        )
        total += ellipse.intensity * (_inside(ellipse, xs, ys) & body)
    values = np.clip(total[..., 0, 0], 0.0, 1.0)
    return Image(grid, values, Role.GROUND_TRUTH)


def disc_phantom(grid: ImageGrid, radius_mm: float, value: float = 1.0, center_mm=(0.0, 0.0), supersample: int = 8) -> Image:
    """Uniform disc with area-weighted edge pixels."""
    if not radius_mm > 0:
        raise DomainError(f"Disc radius must be positive, got {radius_mm}")
    ellipse = Ellipse(
        intensity=value,
        a=radius_mm / grid.half_width_mm,
        b=radius_mm / grid.half_height_mm,
        x0=center_mm[0] / grid.half_width_mm,
        y0=center_mm[1] / grid.half_height_mm,
    )
    xs, ys = _subpixel_coords(grid, supersample)
    values = value * _inside(ellipse, xs, ys).mean(axis=(2, 3))
    return Image(grid, values, Role.GROUND_TRUTH)


def make_phantom(kind: str, grid: ImageGrid, rng=None, n_ellipses: int = 8) -> Image:
    if kind == "shepp-logan":
        return shepp_logan(grid)
    if kind == "random-ellipses":
        return random_ellipse_phantom(grid, rng if rng is not None else np.random.default_rng(0), n_ellipses)
    if kind == "disc":
        return disc_phantom(grid, 0.8 * grid.inscribed_radius_mm, 0.2)
    raise DomainError(f"Unknown phantom kind '{kind}', expected one of {', '.join(PHANTOM_KINDS)}")


def poisson_log_counts(y: np.ndarray, i0: float, rng, electronic_noise_std: float = 0.0) -> np.ndarray:
    """
    Post-log measurement -ln(I / i0) with I ~ Poisson(i0 exp(-y)).

    A nonzero `electronic_noise_std` adds zero-mean Gaussian readout noise to
    the counts before the clamp; the default is pure Poisson.
    """
    expected = i0 * np.exp(-np.asarray(y, dtype=np.float64))
    counts = rng.poisson(expected).astype(np.float64)
    if electronic_noise_std > 0:
        counts += rng.normal(0.0, electronic_noise_std, size=counts.shape)
    counts = np.maximum(counts, 1.0)
    return -np.log(counts / i0)


def simulate_low_dose(y: Sinogram, i0: float, rng, electronic_noise_std: float = 0.0) -> Sinogram:
    if not (i0 > 0):
        raise DomainError(f"Photon count must be positive, got {i0}")
    if np.any(y.values < 0):
        raise DomainError("Line integrals must be non-negative")
    if math.isinf(i0):
        return Sinogram(y.geom, y.values.copy())
    p = poisson_log_counts(y.values, i0, rng, electronic_noise_std)
    return Sinogram(y.geom, p.astype(y.values.dtype))


def sample_i0(rng) -> float:
    return float(10.0 ** rng.uniform(5.0, 8.0))


def _draw_schedule_entry(entry, rng) -> float:
    if isinstance(entry, tuple):
        return float(rng.uniform(entry[0], entry[1]))
    return float(entry)


def sample_truncation_ratio(rng) -> float:
    entry = TRUNCATION_SCHEDULE[int(rng.integers(len(TRUNCATION_SCHEDULE)))]
    return _draw_schedule_entry(entry, rng)


def enumerate_truncation_ratios(rng) -> List[float]:
    return [_draw_schedule_entry(entry, rng) for entry in TRUNCATION_SCHEDULE]


@dataclass(frozen=True, eq=False)
class Sample:
    f: Image
    y: Sinogram
    p: Sinogram
    T: ProjectionMask
    I: ImageMask
    i0: float
    ratio: float
    index: int = 0

    @property
    def noise(self) -> np.ndarray:
        """Measured minus noise-free line integrals inside the truncation mask."""
        return self.T.values * (self.p.values - self.y.values)


@dataclass
class Dataset:
    samples: List[Sample]
    seed: int
    split: str = "train"

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, index):
        return self.samples[index]


@dataclass
class DatasetConfig:
    grid: ImageGrid
    geom: FanBeamGeometry
    n_phantoms: int = 4
    phantom: str = "random-ellipses"
    n_ellipses: int = 8
    schedule_mode: str = "sample"
    ratio: Optional[float] = None
    i0: Optional[float] = None
    ratios: Sequence[float] = field(default_factory=tuple)
    i0s: Sequence[float] = field(default_factory=tuple)
    flip: bool = False
    attenuation_scale: float = DEFAULT_ATTENUATION_SCALE

    def validate(self):
        if self.n_phantoms < 1:
            raise ConfigurationError(f"n_phantoms must be at least 1, got {self.n_phantoms}")
        if self.phantom not in PHANTOM_KINDS:
            raise ConfigurationError(f"Unknown phantom kind '{self.phantom}'")
        if self.schedule_mode not in ("sample", "enumerate"):
            raise ConfigurationError(f"schedule_mode must be 'sample' or 'enumerate', got '{self.schedule_mode}'")
        if self.schedule_mode == "enumerate" and (self.ratio is not None or self.ratios):
            raise ConfigurationError("A fixed ratio list cannot be combined with the enumerated schedule")
        if self.ratio is not None and self.ratios:
            raise ConfigurationError("Give either a single ratio or a ratio list, not both")
        if self.i0 is not None and self.i0s:
            raise ConfigurationError("Give either a single photon count or a list, not both")
        for ratio in ([self.ratio] if self.ratio is not None else []) + list(self.ratios):
            if not (0.0 <= ratio < 1.0):
                raise ConfigurationError(f"Truncation ratio {ratio} outside [0, 1)")
        for i0 in ([self.i0] if self.i0 is not None else []) + list(self.i0s):
            if not (i0 > 0):
                raise ConfigurationError(f"Photon count {i0} must be positive")
        if not self.attenuation_scale > 0:
            raise ConfigurationError(f"attenuation_scale must be positive, got {self.attenuation_scale}")
        if self.flip and not self.geom.is_full_scan:
            raise ConfigurationError("Flip augmentation needs a full-rotation geometry")
        try:
            self.geom.check_covers(self.grid)
        except DomainError as e:
            raise ConfigurationError("Geometry and grid are inconsistent", e)


def _sample_stream(seed: int, split: str, index: int):
    return np.random.default_rng([seed, SPLITS.index(split), index])


def _draw_ratios(config: DatasetConfig, rng) -> List[float]:
    if config.schedule_mode == "enumerate":
        return enumerate_truncation_ratios(rng)
    if config.ratio is not None:
        return [float(config.ratio)]
    if config.ratios:
        return [float(config.ratios[int(rng.integers(len(config.ratios)))])]
    return [sample_truncation_ratio(rng)]


def _draw_i0(config: DatasetConfig, rng) -> float:
    if config.i0 is not None:
        return float(config.i0)
    if config.i0s:
        return float(config.i0s[int(rng.integers(len(config.i0s)))])
    return sample_i0(rng)


def make_sample(f: Image, geom: FanBeamGeometry, ratio: float, i0: float, rng, y: Sinogram = None, index: int = 0) -> Sample:
    if y is None:
        y = forward_project(f, geom)
    T = truncation_mask(geom, ratio)
    noisy = simulate_low_dose(y, i0, rng)
    p = Sinogram(geom, T.values * noisy.values)
    return Sample(f=f, y=y, p=p, T=T, I=roi_mask(f.grid, geom, T), i0=i0, ratio=ratio, index=index)


def _phantom_samples(config: DatasetConfig, seed: int, split: str, index: int) -> List[Sample]:
    rng = _sample_stream(seed, split, index)
    phantom = make_phantom(config.phantom, config.grid, rng, config.n_ellipses)
    values = phantom.values
    if config.flip and rng.random() < 0.5:
        values = np.flipud(values)
    f = Image(config.grid, values * config.attenuation_scale, Role.GROUND_TRUTH)
    y = forward_project(f, config.geom, workers=1)
    return [make_sample(f, config.geom, ratio, _draw_i0(config, rng), rng, y, index) for ratio in _draw_ratios(config, rng)]


def build_dataset(config: DatasetConfig, seed: int, split: str = "train", workers=None) -> Dataset:
    """Every phantom draws from its own (seed, split, index) stream, so the result ignores `workers`."""
    if split not in SPLITS:
        raise ConfigurationError(f"Unknown split '{split}'")
    config.validate()
    workers = workers or PROJECTOR_THREADS
    indices = range(config.n_phantoms)

    def build(index):
        return _phantom_samples(config, seed, split, index)

    bar = progress(total=config.n_phantoms, desc=f"{split} phantoms")
    groups = []
    if workers <= 1:
        for index in indices:
            groups.append(build(index))
            bar.update()
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for group in pool.map(build, indices):
                groups.append(group)
                bar.update()
    bar.close()

    samples = [sample for group in groups for sample in group]
    logger.info(f"Built {split} dataset: {len(samples)} samples from {config.n_phantoms} phantoms (seed {seed})")
    return Dataset(samples=samples, seed=seed, split=split)


def flip_sample(sample: Sample) -> Sample:
    """Vertical image flip, mirrored in the sinogram as view reversal plus detector reversal."""
    geom = sample.y.geom
    if not geom.is_full_scan or geom.angle_start_rad != 0.0:
        raise DomainError("Sinogram flipping needs a full rotation starting at angle 0")
    views = (-np.arange(geom.n_views)) % geom.n_views

    def flip_sino(sino: Sinogram) -> Sinogram:
        return Sinogram(geom, sino.values[views, ::-1])

    f = sample.f.with_values(np.flipud(sample.f.values))
    return Sample(
        f=f,
        y=flip_sino(sample.y),
        p=flip_sino(sample.p),
        T=sample.T,
        I=sample.I,
        i0=sample.i0,
        ratio=sample.ratio,
        index=sample.index,
    )


def ingest_raw_image(path, grid: ImageGrid) -> Image:
    values = read_container(path, expected_shape=grid.shape)
    return Image(grid, values, Role.GENERIC)
