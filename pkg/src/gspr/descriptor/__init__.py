"""Global descriptor network: graph construction, analytic layers, assembly."""

from .graph import GaussianGraph, build_graph, farthest_point_sample, knn_indices
from .network import (
    Descriptor,
    FeatureMask,
    NetConfig,
    apply_feature_mask,
    build_plan,
    config_hash,
    descriptor_forward,
    forward_from_plan,
    backward_from_plan,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .gradcheck import check_gradients, fd_gradient, max_relative_error

__all__ = [
    "GaussianGraph", "build_graph", "farthest_point_sample", "knn_indices",
    "Descriptor", "FeatureMask", "NetConfig", "apply_feature_mask",
    "build_plan", "config_hash", "descriptor_forward", "forward_from_plan",
    "backward_from_plan", "init_params", "load_checkpoint", "save_checkpoint",
    "check_gradients", "fd_gradient", "max_relative_error",
]
