from .fbp_layer import FbpLayer, fbp_layer_backward, fbp_layer_forward
from .objectives import (
    LossOptions,
    compose_corrected,
    compose_corrected_sinogram,
    loss_dualnet,
    loss_image_unet,
    loss_projection_unet,
    loss_wnet,
)
from .architectures import ArchitectureKind, TrainedModel, build_model
from .training import LossCurves, TrainConfig, TrainingState, train
from .inference import reconstruct, stage_features
