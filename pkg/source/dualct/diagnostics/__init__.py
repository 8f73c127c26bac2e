from .hankel import (
    FrameletBases,
    HankelMatrix,
    coupled_artifact_rank_experiment,
    fourier_support,
    framelet_bases,
    framelet_identity_check,
    hankel,
    hankel_rank,
    singular_spectrum,
    spectrum_area,
)
from .metrics import MetricsReport, body_mask, evaluate_regions, nmse, psnr, ssim, ssim_map
