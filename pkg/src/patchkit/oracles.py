"""Independent reference oracles for the self-check command and tests.

Each oracle recomputes a result through a deliberately different route
(naive loops, rasterization, Monte-Carlo sampling, finite differences, a
recursive suppression predicate) so that agreement is meaningful evidence
and not self-confirmation.
"""

import math

import numpy as np

from .boxes import rotated_bev_iou


def naive_group_points(points, config):
    """Reference grouping via a plain per-point loop.

    Returns (ordered coordinate list, coordinate -> point index list dict)
    with the same drop and overflow-keep-first semantics the fast path
    promises.
    """
    points = np.asarray(points)
    dims = config.grid_dims
    coords = []
    members = {}
    for i in range(len(points)):
        key = tuple(
            int(math.floor((points[i, d] - config.origin[d]) / config.voxel_size[d]))
            for d in range(3)
        )
        if not all(0 <= key[d] < dims[d] for d in range(3)):
            continue
        if key not in members:
            if len(members) >= config.max_voxels:
                continue
            members[key] = []
            coords.append(key)
        if len(members[key]) < config.max_points_per_voxel:
            members[key].append(i)
    return coords, members


def _footprint_mask(box, xs, ys):
    # Half-plane membership test in the box's local frame; deliberately does
    # not reuse the corner/clipping machinery under test.  float32 keeps the
    # 2000 x 2000 grids cheap; its rounding is orders of magnitude below the
    # cell-sampling error.
    dx = (xs - box.cx).astype(np.float32)[:, None]
    dy = (ys - box.cy).astype(np.float32)[None, :]
    c = np.float32(math.cos(box.yaw))
    s = np.float32(math.sin(box.yaw))
    local_x = dx * c + dy * s
    local_y = dy * c - dx * s
    return (np.abs(local_x) <= np.float32(0.5 * box.l)) & (
        np.abs(local_y) <= np.float32(0.5 * box.w)
    )


def rasterized_bev_iou(a, b, resolution=2000):
    """BEV IoU by counting cell centers over the union bounding box."""

    def reach(box):
        rx = 0.5 * abs(box.l * math.cos(box.yaw)) + 0.5 * abs(box.w * math.sin(box.yaw))
        ry = 0.5 * abs(box.l * math.sin(box.yaw)) + 0.5 * abs(box.w * math.cos(box.yaw))
        return rx, ry

    ax, ay = reach(a)
    bx, by = reach(b)
    x_min = min(a.cx - ax, b.cx - bx)
    x_max = max(a.cx + ax, b.cx + bx)
    y_min = min(a.cy - ay, b.cy - by)
    y_max = max(a.cy + ay, b.cy + by)
    xs = np.linspace(x_min, x_max, resolution, endpoint=False, dtype=np.float64)
    ys = np.linspace(y_min, y_max, resolution, endpoint=False, dtype=np.float64)
    xs += 0.5 * (x_max - x_min) / resolution
    ys += 0.5 * (y_max - y_min) / resolution
    in_a = _footprint_mask(a, xs, ys)
    in_b = _footprint_mask(b, xs, ys)
    union = np.count_nonzero(in_a | in_b)
    if union == 0:
        return 0.0
    return np.count_nonzero(in_a & in_b) / union


def monte_carlo_iou_3d(a, b, samples=1_000_000, seed=0):
    """Volumetric IoU estimated by sampling uniformly inside box ``a``."""
    rng = np.random.default_rng(seed)
    local = rng.uniform(-0.5, 0.5, size=(samples, 3)) * [a.l, a.w, a.h]
    c, s = math.cos(a.yaw), math.sin(a.yaw)
    world = np.empty_like(local)
    world[:, 0] = a.cx + local[:, 0] * c - local[:, 1] * s
    world[:, 1] = a.cy + local[:, 0] * s + local[:, 1] * c
    world[:, 2] = a.cz + local[:, 2]

    dx = world[:, 0] - b.cx
    dy = world[:, 1] - b.cy
    cb, sb = math.cos(b.yaw), math.sin(b.yaw)
    inside = (
        (np.abs(dx * cb + dy * sb) <= 0.5 * b.l)
        & (np.abs(-dx * sb + dy * cb) <= 0.5 * b.w)
        & (np.abs(world[:, 2] - b.cz) <= 0.5 * b.h)
    )
    intersection = a.volume * np.count_nonzero(inside) / samples
    union = a.volume + b.volume - intersection
    return intersection / union


def brute_force_nms_keep(boxes, scores, threshold):
    """Kept-index set from the recursive suppression predicate.

    A detection survives exactly when no surviving higher-priority
    detection overlaps it beyond the threshold (priority: higher score
    first, input order on ties).  Evaluated by memoized recursion rather
    than the production sweep.
    """
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    decided = {}

    def kept(i):
        if i not in decided:
            rank = order.index(i)
            decided[i] = all(
                not (kept(j) and rotated_bev_iou(boxes[i], boxes[j]) > threshold)
                for j in order[:rank]
            )
        return decided[i]

    return [i for i in order if kept(i)]


def finite_difference(fn, x, step=1e-5):
    """Central finite-difference derivative of a scalar function."""
    return (fn(x + step) - fn(x - step)) / (2.0 * step)


def trapezoid_average_precision(scores, is_tp, num_targets):
    """Area under the raw PR curve (percent), by trapezoidal integration."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    tp = np.cumsum(np.asarray(is_tp)[order])
    fp = np.cumsum(~np.asarray(is_tp)[order])
    recall = tp / num_targets
    precision = tp / np.maximum(tp + fp, 1)
    recall = np.concatenate([[0.0], recall])
    precision = np.concatenate([[precision[0] if len(precision) else 0.0], precision])
    return 100.0 * float(np.trapezoid(precision, recall))
