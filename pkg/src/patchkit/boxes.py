"""Oriented 3D boxes and the overlap math built on them.

A single box convention is used everywhere: (cx, cy, cz) is the centroid,
(l, w, h) are the extents along the box's local x/y/z axes, and yaw is the
rotation about the vertical axis, zero when the length axis points along +x,
counter-clockwise positive seen from above, normalized to (-pi, pi].

BEV polygons are plain (N, 2) float arrays with counter-clockwise vertex
order; box footprints start at the front-left corner of the local frame.
"""

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError

TWO_PI = 2.0 * math.pi
HALF_PI = 0.5 * math.pi

# Intersection polygons below this area are treated as empty so that
# touching boxes report exactly zero overlap.
DEGENERATE_AREA = 1e-12


def wrap_angle(angle):
    """Wrap an angle (scalar or array) to (-pi, pi]."""
    a = np.asarray(angle, dtype=np.float64)
    wrapped = -(np.mod(-a + math.pi, TWO_PI) - math.pi)
    if np.ndim(angle) == 0:
        return float(wrapped)
    return wrapped


@dataclass
class OrientedBox3D:
    """7-DoF oriented box: centroid, extents, and yaw about the z-axis."""

    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw: float

    def __post_init__(self):
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise ContractError(
                f"box extents must be positive, got l={self.l} w={self.w} h={self.h}"
            )
        self.yaw = wrap_angle(self.yaw)

    @property
    def bottom_z(self):
        return self.cz - 0.5 * self.h

    @property
    def top_z(self):
        return self.cz + 0.5 * self.h

    @property
    def volume(self):
        return self.l * self.w * self.h

    @property
    def bev_distance(self):
        """Distance of the centroid from the sensor in the ground plane."""
        return math.hypot(self.cx, self.cy)

    def as_array(self):
        return np.array(
            [self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw],
            dtype=np.float64,
        )

    @classmethod
    def from_array(cls, values):
        cx, cy, cz, l, w, h, yaw = (float(v) for v in values)
        return cls(cx, cy, cz, l, w, h, yaw)


# Unit footprint corners in the local frame: front-left first, then CCW.
_LOCAL_CORNERS = np.array(
    [[0.5, 0.5], [-0.5, 0.5], [-0.5, -0.5], [0.5, -0.5]], dtype=np.float64
)


def bev_corners(box):
    """Footprint corners as a (4, 2) CCW polygon, front-left corner first."""
    return bev_corners_batch(box.as_array()[None, :])[0]


def bev_corners_batch(boxes):
    """Footprint corners for an (N, 7) box array, returned as (N, 4, 2)."""
    boxes = np.asarray(boxes, dtype=np.float64)
    local = _LOCAL_CORNERS[None, :, :] * boxes[:, None, [3, 4]]
    c = np.cos(boxes[:, 6])
    s = np.sin(boxes[:, 6])
    x = local[:, :, 0] * c[:, None] - local[:, :, 1] * s[:, None]
    y = local[:, :, 0] * s[:, None] + local[:, :, 1] * c[:, None]
    return np.stack([x + boxes[:, None, 0], y + boxes[:, None, 1]], axis=2)


def rotate_about_z(obj, angle, pivot=(0.0, 0.0)):
    """Rigidly rotate points, a box, or a point cloud about a vertical axis.

    Accepts an (N, >=2) point array (extra columns untouched), an
    OrientedBox3D (yaw is incremented and renormalized), or any dataclass
    with a ``points`` array field.  z coordinates are never modified.
    """
    px, py = pivot
    c = math.cos(angle)
    s = math.sin(angle)
    if isinstance(obj, OrientedBox3D):
        dx = obj.cx - px
        dy = obj.cy - py
        return OrientedBox3D(
            px + dx * c - dy * s,
            py + dx * s + dy * c,
            obj.cz,
            obj.l,
            obj.w,
            obj.h,
            obj.yaw + angle,
        )
    if isinstance(obj, np.ndarray):
        out = np.array(obj, dtype=np.float64, copy=True)
        dx = out[:, 0] - px
        dy = out[:, 1] - py
        out[:, 0] = px + dx * c - dy * s
        out[:, 1] = py + dx * s + dy * c
        return out
    if dataclasses.is_dataclass(obj) and hasattr(obj, "points"):
        return dataclasses.replace(obj, points=rotate_about_z(obj.points, angle, pivot))
    raise ContractError(f"cannot rotate object of type {type(obj).__name__}")


def nearest_axis_rotation(yaw):
    """Closest multiple of pi/2 to ``yaw``; ties resolve to the smaller one."""
    k = math.ceil(yaw / HALF_PI - 0.5)
    return k * HALF_PI


def _axis_aligned_half_extents(l, w, yaw):
    # yaw must be (numerically) a multiple of pi/2; odd multiples swap l/w.
    k = int(round(yaw / HALF_PI))
    if k % 2 == 0:
        return 0.5 * l, 0.5 * w
    return 0.5 * w, 0.5 * l


def axis_aligned_bev_iou(gt, anchor):
    """BEV IoU after snapping the ground-truth box to its nearest axis.

    The anchor must already be axis-aligned (yaw 0 or pi/2); the ground
    truth is rotated about its own center to the nearest axis before the
    rectangles are intersected.
    """
    if min(abs(anchor.yaw), abs(abs(anchor.yaw) - HALF_PI)) > 1e-12:
        raise ContractError(f"anchor yaw must be 0 or pi/2, got {anchor.yaw}")
    gx, gy = _axis_aligned_half_extents(gt.l, gt.w, nearest_axis_rotation(gt.yaw))
    ax, ay = _axis_aligned_half_extents(anchor.l, anchor.w, anchor.yaw)
    ix = min(gt.cx + gx, anchor.cx + ax) - max(gt.cx - gx, anchor.cx - ax)
    iy = min(gt.cy + gy, anchor.cy + ay) - max(gt.cy - gy, anchor.cy - ay)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = 4.0 * gx * gy + 4.0 * ax * ay - inter
    return inter / union


def axis_aligned_bev_iou_matrix(gt_boxes, anchor_boxes):
    """Vectorized axis-aligned BEV IoU, shape (num_gt, num_anchors)."""
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 7)
    an = np.asarray(anchor_boxes, dtype=np.float64).reshape(-1, 7)

    def half_extents(boxes):
        k = np.rint(boxes[:, 6] / HALF_PI).astype(np.int64)
        swap = (k % 2) != 0
        hx = np.where(swap, boxes[:, 4], boxes[:, 3]) * 0.5
        hy = np.where(swap, boxes[:, 3], boxes[:, 4]) * 0.5
        return hx, hy

    snapped = gt.copy()
    snapped[:, 6] = [nearest_axis_rotation(y) for y in gt[:, 6]]
    ghx, ghy = half_extents(snapped)
    ahx, ahy = half_extents(an)

    ix = np.minimum(gt[:, 0, None] + ghx[:, None], an[None, :, 0] + ahx[None, :]) - np.maximum(
        gt[:, 0, None] - ghx[:, None], an[None, :, 0] - ahx[None, :]
    )
    iy = np.minimum(gt[:, 1, None] + ghy[:, None], an[None, :, 1] + ahy[None, :]) - np.maximum(
        gt[:, 1, None] - ghy[:, None], an[None, :, 1] - ahy[None, :]
    )
    inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
    union = (4.0 * ghx * ghy)[:, None] + (4.0 * ahx * ahy)[None, :] - inter
    return inter / union


def polygon_area(polygon):
    """Signed shoelace area of an (N, 2) polygon; positive for CCW order."""
    p = np.asarray(polygon, dtype=np.float64)
    if len(p) < 3:
        return 0.0
    x = p[:, 0]
    y = p[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def clip_polygon(subject, clip):
    """Sutherland-Hodgman clip of ``subject`` against a convex CCW ``clip``."""
    output = [tuple(p) for p in np.asarray(subject, dtype=np.float64)]
    clip = np.asarray(clip, dtype=np.float64)
    n = len(clip)
    for i in range(n):
        if len(output) < 3:
            return []
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inputs = output
        output = []
        values = [ex * (py - ay) - ey * (px - ax) for px, py in inputs]
        for j, (point, value) in enumerate(zip(inputs, values)):
            nxt = (j + 1) % len(inputs)
            if value >= 0.0:
                output.append(point)
            if value * values[nxt] < 0.0:
                # Edge crosses the clip line; add the intersection point.
                px, py = point
                qx, qy = inputs[nxt]
                t = value / (value - values[nxt])
                output.append((px + t * (qx - px), py + t * (qy - py)))
    return output


def rotated_bev_intersection_area(a, b):
    """Exact footprint intersection area of two oriented boxes.

    The subject/clip roles are assigned by a deterministic parameter order
    so the result is bit-identical under argument swap.
    """
    if tuple(b.as_array()) < tuple(a.as_array()):
        a, b = b, a
    region = clip_polygon(bev_corners(a), bev_corners(b))
    area = polygon_area(region)
    if area < DEGENERATE_AREA:
        return 0.0
    return area


def rotated_bev_iou(a, b):
    """Exact BEV IoU from convex polygon clipping; symmetric in a, b."""
    inter = rotated_bev_intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    union = a.l * a.w + b.l * b.w - inter
    return min(inter / union, 1.0)


def iou_3d(a, b):
    """Volumetric IoU: rotated footprint overlap times vertical overlap."""
    overlap_z = min(a.top_z, b.top_z) - max(a.bottom_z, b.bottom_z)
    if overlap_z <= 0.0:
        return 0.0
    inter = rotated_bev_intersection_area(a, b) * overlap_z
    if inter == 0.0:
        return 0.0
    union = a.volume + b.volume - inter
    return min(inter / union, 1.0)


def points_in_box(points, box, margin=0.0):
    """Indices of points inside ``box`` enlarged by ``margin`` per face.

    Each extent grows by 2 * margin; boundaries are inclusive.  ``points``
    may have extra columns beyond x, y, z.
    """
    if margin < 0:
        raise ContractError(f"margin must be non-negative, got {margin}")
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return np.empty(0, dtype=np.int64)
    dx = pts[:, 0] - box.cx
    dy = pts[:, 1] - box.cy
    dz = pts[:, 2] - box.cz
    c = math.cos(box.yaw)
    s = math.sin(box.yaw)
    local_x = dx * c + dy * s
    local_y = -dx * s + dy * c
    keep = (
        (np.abs(local_x) <= 0.5 * box.l + margin)
        & (np.abs(local_y) <= 0.5 * box.w + margin)
        & (np.abs(dz) <= 0.5 * box.h + margin)
    )
    return np.nonzero(keep)[0]
