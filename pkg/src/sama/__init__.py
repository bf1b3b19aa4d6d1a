"""Spatio-temporal selective state-space models for 2D-to-3D pose lifting, in numpy."""
from .core import JointGraph, ModelConfig, PoseSeq, h36m_graph, skeleton
from .network import SamaModel, count_params, forward, load_checkpoint, predict, save_checkpoint

__all__ = [
    "JointGraph", "ModelConfig", "PoseSeq", "SamaModel", "count_params", "forward",
    "h36m_graph", "load_checkpoint", "predict", "save_checkpoint", "skeleton",
]
__version__ = "0.1.0"
