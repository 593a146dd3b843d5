"""Semantic robot programming on synthetic tabletop scenes.

Estimate object poses from a depth image (``digest``), abstract them into an
axiomatic scene graph (``scenegraph``) and plan pick-and-place actions that
reproduce a demonstrated goal graph (``plan``).
"""

from .geometry import CameraIntrinsics, DepthImage, ModelInfo, Pose, pose_error
from .models import ModelRegistry, builtin_registry, load_registry
from .scene import GroundTruthScene, PlacedObject

__all__ = [
    "CameraIntrinsics", "DepthImage", "ModelInfo", "Pose", "pose_error",
    "ModelRegistry", "builtin_registry", "load_registry",
    "GroundTruthScene", "PlacedObject",
]
__version__ = "0.1.0"
