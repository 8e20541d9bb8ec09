"""Bounding-box refinement for visual tracking at desk scale.

The refinement network re-estimates a base tracker's box from a crop around
it, using frame-1 reference features fused by correlation.
"""

from .geometry import Box, CropSpec, CropTransform, JitterParams, iou
from .model import ModelConfig, RefineNet, load_checkpoint, save_checkpoint
from .refine import BoxRefiner, SimulatedTracker, SimulatedTrackerSpec

__version__ = "0.1.0"

__all__ = [
    "Box", "CropSpec", "CropTransform", "JitterParams", "iou",
    "ModelConfig", "RefineNet", "load_checkpoint", "save_checkpoint",
    "BoxRefiner", "SimulatedTracker", "SimulatedTrackerSpec",
]
