"""Transformer-assisted convolutional feature extraction for cell segmentation, at desk scale."""

from .autodiff import Graph, backward
from .errors import ConfigError, ContractError, DimensionError
from .fusion import fuse, fuse_all
from .metrics import InstanceMaskSet, connected_components, iou, miou
from .model import ModelVariant, forward, init_params

__version__ = "0.1.0"

__all__ = [
    "Graph", "backward", "ConfigError", "ContractError", "DimensionError", "fuse", "fuse_all",
    "InstanceMaskSet", "connected_components", "iou", "miou", "ModelVariant", "forward", "init_params",
]
