"""
Image quality metrics: NMSE, PSNR and SSIM over a full image or a region.

PSNR defaults to the N*M-scaled convention (peak times pixel count over the
l2 error norm); `convention="standard"` gives the usual peak^2 / MSE form.
SSIM defaults to single global statistics over the region; `windowed=True`
uses scikit-image's local 7x7 SSIM averaged over the region.
"""
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import scipy.ndimage
from skimage.metrics import structural_similarity

from ..dualct_error import DomainError, ShapeError

PSNR_CONVENTIONS = ("scaled", "standard")
K1 = 0.01
K2 = 0.03


def _field(x) -> np.ndarray:
    return np.asarray(getattr(x, "values", x), dtype=np.float64)


def _pair(f_star, f_bar, mask):
    a, b = _field(f_star), _field(f_bar)
    if a.shape != b.shape:
        raise ShapeError(f"Metric inputs differ in shape: {a.shape} vs {b.shape}")
    if mask is None:
        return a.ravel(), b.ravel()
    m = _field(mask)
    if m.shape != a.shape:
        raise ShapeError(f"Mask shape {m.shape} differs from image {a.shape}")
    m = m > 0.5
    if not np.any(m):
        raise DomainError("Metric mask selects no pixels")
    return a[m], b[m]


def nmse(f_star, f_bar, mask=None) -> float:
    a, b = _pair(f_star, f_bar, mask)
    ref = float(np.sum(a * a))
    if ref == 0.0:
        raise DomainError("NMSE reference has zero norm on the region")
    return float(np.sum((a - b) ** 2) / ref)


def psnr(f_star, f_bar, mask=None, convention: str = "scaled") -> float:
    """Returns +inf for identical inputs."""
    if convention not in PSNR_CONVENTIONS:
        raise DomainError(f"Unknown PSNR convention '{convention}'")
    a, b = _pair(f_star, f_bar, mask)
    err = float(np.linalg.norm(a - b))
    if err == 0.0:
        return math.inf
    peak = float(np.max(np.abs(a)))
    scale = a.size if convention == "scaled" else math.sqrt(a.size)
    return 20.0 * math.log10(scale * peak / err)


def _data_range(a: np.ndarray, L: Optional[float]) -> float:
    if L is None:
        L = float(np.ptp(a)) or float(np.max(np.abs(a))) or 1.0
    if not L > 0:
        raise DomainError(f"SSIM dynamic range must be positive, got {L}")
    return L


def ssim(f_star, f_bar, L: Optional[float] = None, k1: float = K1, k2: float = K2, mask=None, windowed: bool = False) -> float:
    if windowed:
        values = ssim_map(f_star, f_bar, L, k1, k2)
        region = np.ones(values.shape, dtype=bool) if mask is None else _field(mask) > 0.5
        if not np.any(region):
            raise DomainError("Metric mask selects no pixels")
        return float(np.mean(values[region]))
    a, b = _pair(f_star, f_bar, mask)
    L = _data_range(a, L)
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    mu_a, mu_b = a.mean(), b.mean()
    var_a, var_b = a.var(), b.var()
    cov = np.mean((a - mu_a) * (b - mu_b))
    value = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(np.clip(value, -1.0, 1.0))


def ssim_map(f_star, f_bar, L: Optional[float] = None, k1: float = K1, k2: float = K2, mask=None) -> np.ndarray:
    """Local SSIM map; zero outside `mask` when one is given."""
    a, b = _field(f_star), _field(f_bar)
    if a.shape != b.shape:
        raise ShapeError(f"Metric inputs differ in shape: {a.shape} vs {b.shape}")
    L = _data_range(a, L)
    _, values = structural_similarity(a, b, data_range=L, K1=k1, K2=k2, full=True)
    if mask is not None:
        values = values * (_field(mask) > 0.5)
    return values


def body_mask(image, threshold: Optional[float] = None) -> np.ndarray:
    """Largest connected region above `threshold` (default 5% of the peak) with holes filled."""
    values = _field(image)
    if threshold is None:
        threshold = 0.05 * float(np.max(values))
    labels, count = scipy.ndimage.label(values > threshold)
    if count == 0:
        return np.zeros(values.shape, dtype=np.float32)
    sizes = scipy.ndimage.sum_labels(np.ones_like(values), labels, index=np.arange(1, count + 1))
    largest = labels == (int(np.argmax(sizes)) + 1)
    return scipy.ndimage.binary_fill_holes(largest).astype(np.float32)


@dataclass(frozen=True)
class MetricsReport:
    sample_id: str
    region: str
    nmse: float
    psnr_db: float
    ssim: float
    method: str = ""
    psnr_convention: str = "scaled"
    ssim_windowed: bool = False

    def __post_init__(self):
        if self.nmse < 0:
            raise DomainError(f"NMSE cannot be negative, got {self.nmse}")
        if not (-1.0 <= self.ssim <= 1.0):
            raise DomainError(f"SSIM must lie in [-1, 1], got {self.ssim}")

    def to_row(self) -> dict:
        return asdict(self)


def evaluate(f_star, f_bar, mask=None, region: str = "full", sample_id: str = "", method: str = "",
             psnr_convention: str = "scaled", ssim_windowed: bool = False) -> MetricsReport:
    return MetricsReport(
        sample_id=str(sample_id),
        region=region,
        nmse=nmse(f_star, f_bar, mask),
        psnr_db=psnr(f_star, f_bar, mask, psnr_convention),
        ssim=ssim(f_star, f_bar, mask=mask, windowed=ssim_windowed),
        method=method,
        psnr_convention=psnr_convention,
        ssim_windowed=ssim_windowed,
    )


def evaluate_regions(f_star, f_bar, roi=None, sample_id: str = "", method: str = "",
                     psnr_convention: str = "scaled", ssim_windowed: bool = False):
    """
    Reports for the full image, the ROI disc and the body region of the
    reference. With an ROI the body region is clipped to it and tagged "body_roi".
    """
    regions = [("full", None)]
    if roi is not None:
        regions.append(("roi", _field(roi)))
    body = body_mask(f_star)
    if np.any(body):
        if roi is None:
            regions.append(("body", body))
        else:
            regions.append(("body_roi", body * _field(roi)))
    reports = []
    for name, mask in regions:
        if mask is not None and not np.any(mask > 0.5):
            continue
        reports.append(evaluate(f_star, f_bar, mask, name, sample_id, method, psnr_convention, ssim_windowed))
    return reports
