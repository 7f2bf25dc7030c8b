"""Multi-frame monocular depth with motion-aware cost volumes."""

from .errors import MotionDepthError
from .geometry import CameraIntrinsics, RigidTransform
from .pipeline import PipelineConfig, forward_two_stage, infer, load_model, train
from .synthdata import SceneSample, generate_dataset, render_scene

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "MotionDepthError",
    "PipelineConfig",
    "RigidTransform",
    "SceneSample",
    "forward_two_stage",
    "generate_dataset",
    "infer",
    "load_model",
    "render_scene",
    "train",
]
