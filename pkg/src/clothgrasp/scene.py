"""Scene container shared by the generator, IO, training, and grasping code."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CLASS_BACKGROUND = 0
CLASS_OUTER_EDGE = 1
CLASS_INNER_EDGE = 2
CLASS_OTHER_CLOTHING = 3
NUM_CLASSES = 4
CLASS_NAMES = ("background", "outer_edge", "inner_edge", "other_clothing")

CLOTHING_CLASSES = (CLASS_OUTER_EDGE, CLASS_INNER_EDGE, CLASS_OTHER_CLOTHING)

# depth normalisation for network input (mm -> dimensionless)
DEPTH_NORM_MM = 2000.0


@dataclass
class Scene:
    """Aligned RGB / depth / label triple.

    rgb: (3,H,W) float64 in [0,1]; depth: (H,W) uint16 millimetres with
    0 meaning no reading; label: (H,W) uint8 class indices.
    """

    rgb: np.ndarray
    depth: np.ndarray
    label: np.ndarray
    camera: object | None = None

    def __post_init__(self):
        if self.rgb.shape[0] != 3 or self.rgb.ndim != 3:
            raise ValueError(f"rgb must be (3,H,W), got {self.rgb.shape}")
        if self.rgb.shape[1:] != self.depth.shape or self.depth.shape != self.label.shape:
            raise ValueError("rgb, depth and label extents must agree")

    @property
    def height(self):
        return self.label.shape[0]

    @property
    def width(self):
        return self.label.shape[1]


def net_inputs(scene: Scene):
    """Network-ready arrays: rgb (3,H,W) and normalised depth (1,H,W)."""
    depth = scene.depth.astype(np.float64) / DEPTH_NORM_MM
    return scene.rgb.astype(np.float64), depth[None]
