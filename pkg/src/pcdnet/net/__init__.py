"""Model assembly: trees, network, surgery and checkpoints."""
from .trees import AFLW21, COFW29, TREES, W300_68, DendriticTree, get_tree, mirror_name
from .model import (
    BackboneSpec,
    BranchSpec,
    FireSpec,
    ForwardOutput,
    ModelConfig,
    PCDModel,
    build_from_config,
    build_model,
    condition_on_pose,
    edge_kernel_size,
    forward,
    incidence,
    message_pass,
)
from .surgery import network_surgery
from .checkpoint import load_checkpoint, read_header, save_checkpoint

__all__ = [
    "AFLW21", "COFW29", "W300_68", "TREES", "DendriticTree", "get_tree", "mirror_name",
    "BackboneSpec", "BranchSpec", "FireSpec", "ForwardOutput", "ModelConfig", "PCDModel",
    "build_from_config", "build_model", "condition_on_pose", "edge_kernel_size", "forward",
    "incidence", "message_pass", "network_surgery", "load_checkpoint", "read_header", "save_checkpoint",
]
