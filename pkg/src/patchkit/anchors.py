"""Anchor grids, IoU-threshold target assignment, and balanced sampling.

Detection labels use strict "surpass the threshold" semantics: an anchor is
a detection positive when its best axis-aligned BEV IoU exceeds 0.6, a
negative when it does not exceed 0.45, and ignored in between.  Regression
positives are the anchors exceeding 0.45.  In addition, every ground truth
with non-zero overlap forces its best anchor positive so no object is left
unlearnable.
"""

from dataclasses import dataclass

import numpy as np

from .boxes import HALF_PI, axis_aligned_bev_iou_matrix
from .errors import ContractError, DataError

# Standard KITTI car anchor: dimensions (l, w, h) and center height.
CAR_ANCHOR_DIMS = (3.9, 1.6, 1.56)
CAR_ANCHOR_Z = -1.0

DET_POSITIVE_IOU = 0.6
DET_NEGATIVE_IOU = 0.45
REG_POSITIVE_IOU = 0.45

POSITIVE = 1
IGNORE = 0
NEGATIVE = -1


@dataclass
class AnchorGridSpec:
    rows: int
    cols: int
    stride: float
    origin: tuple  # (x, y) of the grid's minimum corner
    anchor_dims: tuple = CAR_ANCHOR_DIMS  # (l, w, h)
    anchor_z: float = CAR_ANCHOR_Z
    orientations: tuple = (0.0, HALF_PI)

    def __post_init__(self):
        if self.stride <= 0:
            raise ContractError("stride must be positive")

    @property
    def num_anchors(self):
        return self.rows * self.cols * len(self.orientations)

    @classmethod
    def for_patch(cls, center, patch_size=9.6, rows=32, cols=32, **kwargs):
        """32 x 32 dual-orientation grid covering a patch footprint."""
        stride = patch_size / rows
        origin = (center[0] - 0.5 * patch_size, center[1] - 0.5 * patch_size)
        return cls(rows=rows, cols=cols, stride=stride, origin=origin, **kwargs)


def generate_anchors(spec):
    """All anchors of a grid as an (K, 7) array.

    Order is row-major over (i, j) cell indices with orientation as the
    fastest axis; centers sit at cell midpoints.
    """
    l, w, h = spec.anchor_dims
    xs = spec.origin[0] + (np.arange(spec.rows) + 0.5) * spec.stride
    ys = spec.origin[1] + (np.arange(spec.cols) + 0.5) * spec.stride
    yaws = np.asarray(spec.orientations, dtype=np.float64)
    grid_x, grid_y, grid_yaw = np.meshgrid(xs, ys, yaws, indexing="ij")
    k = grid_x.size
    anchors = np.empty((k, 7), dtype=np.float64)
    anchors[:, 0] = grid_x.ravel()
    anchors[:, 1] = grid_y.ravel()
    anchors[:, 2] = spec.anchor_z
    anchors[:, 3] = l
    anchors[:, 4] = w
    anchors[:, 5] = h
    anchors[:, 6] = grid_yaw.ravel()
    return anchors


@dataclass
class MatchResult:
    """Per-anchor assignment produced by match_anchors."""

    det_label: np.ndarray  # (K,) int8: POSITIVE / IGNORE / NEGATIVE
    reg_positive: np.ndarray  # (K,) bool
    matched_gt: np.ndarray  # (K,) int32, -1 when unmatched
    best_iou: np.ndarray  # (K,) float64

    @property
    def positive_indices(self):
        return np.nonzero(self.det_label == POSITIVE)[0]

    @property
    def negative_indices(self):
        return np.nonzero(self.det_label == NEGATIVE)[0]

    @property
    def reg_indices(self):
        return np.nonzero(self.reg_positive)[0]


def match_anchors(
    anchors,
    gt_boxes,
    det_positive_iou=DET_POSITIVE_IOU,
    det_negative_iou=DET_NEGATIVE_IOU,
    reg_positive_iou=REG_POSITIVE_IOU,
):
    """Assign detection/regression labels to anchors against ground truth.

    Overlap is axis-aligned BEV IoU computed against each anchor's own
    orientation.  Every anchor matches its highest-IoU ground truth; each
    ground truth additionally forces its own best-overlap anchor positive
    (ties to the lowest anchor index).
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 7)
    k = len(anchors)
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 7)

    if len(gt) == 0:
        return MatchResult(
            det_label=np.full(k, NEGATIVE, dtype=np.int8),
            reg_positive=np.zeros(k, dtype=bool),
            matched_gt=np.full(k, -1, dtype=np.int32),
            best_iou=np.zeros(k, dtype=np.float64),
        )

    iou = axis_aligned_bev_iou_matrix(gt, anchors)  # (M, K)
    matched_gt = np.argmax(iou, axis=0).astype(np.int32)
    best_iou = iou[matched_gt, np.arange(k)]

    det_label = np.full(k, IGNORE, dtype=np.int8)
    det_label[best_iou > det_positive_iou] = POSITIVE
    det_label[best_iou <= det_negative_iou] = NEGATIVE
    reg_positive = best_iou > reg_positive_iou
    matched_gt = np.where(best_iou > 0.0, matched_gt, -1).astype(np.int32)

    # Force-match each ground truth's best anchor so it is always learnable.
    for j in range(len(gt)):
        best_anchor = int(np.argmax(iou[j]))
        if iou[j, best_anchor] > 0.0:
            det_label[best_anchor] = POSITIVE
            reg_positive[best_anchor] = True
            matched_gt[best_anchor] = j
    return MatchResult(det_label, reg_positive, matched_gt, best_iou)


@dataclass
class BalancedSample:
    positive: np.ndarray  # sorted anchor indices
    negative: np.ndarray


def sample_balanced(match, n_total, seed):
    """Seeded 1:3 positive:negative anchor sampling without replacement.

    Targets n_total // 4 positives; any positive deficit is filled with
    extra negatives so the total is preserved whenever enough negatives
    exist.
    """
    if n_total < 4:
        raise ContractError(f"n_total must be at least 4, got {n_total}")
    pos_pool = match.positive_indices
    neg_pool = match.negative_indices
    if len(neg_pool) == 0:
        raise DataError("degenerate patch: no negative anchors to sample")

    rng = np.random.default_rng(seed)
    n_pos = min(n_total // 4, len(pos_pool))
    n_neg = min(n_total - n_pos, len(neg_pool))
    positive = np.sort(rng.choice(pos_pool, size=n_pos, replace=False)) if n_pos else np.empty(0, dtype=np.int64)
    negative = np.sort(rng.choice(neg_pool, size=n_neg, replace=False))
    return BalancedSample(positive=positive.astype(np.int64), negative=negative.astype(np.int64))
