"""Geometry-grounded stitching of generated views into explicit 4D scene assets."""

from .camera import Camera, interpolate_pose, project, unproject
from .errors import Stitch4DError
from .frames import BitMask, ColoredPointCloud, DepthFrame, LatticeMesh, RgbFrame
from .stitch import SceneAsset

__version__ = "0.1.0"

__all__ = [
    "BitMask",
    "Camera",
    "ColoredPointCloud",
    "DepthFrame",
    "LatticeMesh",
    "RgbFrame",
    "SceneAsset",
    "Stitch4DError",
    "interpolate_pose",
    "project",
    "unproject",
]
