from .tensor import Tensor, Parameter, backward, backward_many, detach
from .layers import BatchNormState, avg_pool2, batch_norm, concat_skip, conv2d, crop, relu, unpool2
from .network import NetworkGraph, attach_bridge, build_backbone, forward, backward as network_backward
from .optim import OptimState, adam_step, report_validation
