"""Dual-domain learned reconstruction for low-dose interior CT."""
__version__ = "1.0.0"

from .dualct_error import (
    ConfigurationError,
    ContainerFormatError,
    DivergenceError,
    DomainError,
    DualCtError,
    NumericalError,
    ShapeError,
)
from .geometry import (
    FanBeamGeometry,
    ImageGrid,
    ImageMask,
    ProjectionMask,
    kept_detector_count,
    roi_mask,
    scaled_geometry,
    scaled_grid,
    standard_geometry,
    standard_grid,
    truncation_mask,
)
from .projector import Image, Role, Sinogram, back_project, fbp, fbp_adjoint, forward_project, ramp_filter
from .container import read_container, write_container
from .acquisition import Dataset, DatasetConfig, Sample, build_dataset, make_phantom, simulate_low_dose
from .baselines import TvConfig, extrapolate_sinogram, tv_reconstruct
from .config import ExperimentConfig, load_config
