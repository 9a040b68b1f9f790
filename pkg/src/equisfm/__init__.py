"""Outlier-aware equivariant structure from motion on sparse track tensors."""

from .equinet import ModelParams, NetConfig, forward, init_params
from .geometry import CameraPose, align_similarity, pose_errors, triangulate
from .robustba import RobustBAConfig, robust_ba_pipeline
from .synth import SceneConfig, generate_scene
from .trackstore import TrackTensor, chain_matches, normalize_tracks
from .training import TrainConfig, infer, train

__version__ = "0.1.0"

__all__ = [
    "CameraPose",
    "ModelParams",
    "NetConfig",
    "RobustBAConfig",
    "SceneConfig",
    "TrackTensor",
    "TrainConfig",
    "align_similarity",
    "chain_matches",
    "forward",
    "generate_scene",
    "infer",
    "init_params",
    "normalize_tracks",
    "pose_errors",
    "robust_ba_pipeline",
    "train",
    "triangulate",
]
