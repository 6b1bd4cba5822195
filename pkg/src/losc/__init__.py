"""Lidar pseudo-label consolidation: back-projection, temporal voting,
augmentation consistency, robust-class combination and iterative refinement."""

from .core import (
    IGNORE_ID,
    ClassSet,
    ConfigError,
    FormatError,
    Labeling,
    MalformedPoseError,
    PointCloud,
    Pose,
    Sequence,
    nuscenes_classes,
)

__version__ = "0.1.0"

__all__ = [
    "IGNORE_ID", "ClassSet", "ConfigError", "FormatError", "Labeling", "MalformedPoseError",
    "PointCloud", "Pose", "Sequence", "nuscenes_classes", "__version__",
]
