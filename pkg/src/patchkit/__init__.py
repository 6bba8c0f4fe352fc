"""Non-learned machinery for patch-based two-stage 3D detection.

The package covers KITTI ingestion, sparse voxel encoding, oriented-box
codecs and IoU, anchor matching, patch construction and augmentation, loss
mathematics, NMS, and KITTI-protocol AP evaluation.  Anything learned plugs
in at the scorer boundary (see ``patchkit.refinement``).
"""

__version__ = "0.1.0"

from .boxes import (
    OrientedBox3D,
    axis_aligned_bev_iou,
    bev_corners,
    iou_3d,
    nearest_axis_rotation,
    points_in_box,
    rotate_about_z,
    rotated_bev_iou,
    wrap_angle,
)
from .errors import ContractError, DataError, FormatError, NumericError, PatchkitError

__all__ = [
    "OrientedBox3D",
    "axis_aligned_bev_iou",
    "bev_corners",
    "iou_3d",
    "nearest_axis_rotation",
    "points_in_box",
    "rotate_about_z",
    "rotated_bev_iou",
    "wrap_angle",
    "ContractError",
    "DataError",
    "FormatError",
    "NumericError",
    "PatchkitError",
    "__version__",
]
