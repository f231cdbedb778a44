"""Unsupervised optical flow with augmentation as a regularizer, on a numpy autodiff engine."""

from .dataeval import EvalReport, SceneSpec, SyntheticScene, aepe, evaluate, fl_rate, flow_to_color, generate_scene, \
    read_flo, write_flo
from .flowcore import (PhotometricConfig, charbonnier_consistency, occlusion_forward_backward, photometric_loss,
                       smoothness_loss, warp)
from .network import FlowNetwork, NetConfig, load_checkpoint, predict, predict_flow, save_checkpoint
from .tensor import ContractError, Graph, Tensor, backward, stop_gradient
from .training import StepReport, TrainConfig, fit, train_step
from .transform import SpatialTransform, transform_flow, transform_image, transform_occlusion

__version__ = "0.1.0"
