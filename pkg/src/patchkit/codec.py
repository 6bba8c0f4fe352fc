"""Residual and corner target codecs between ground-truth and anchor boxes.

Residual targets follow the nine-component layout
(dx, dy, dz_bottom, dz_top, dw, dh, dl, d_eta, d_zeta) plus a direction
bit.  Center offsets are normalized by the anchor's footprint diagonal,
the two z components are raw bottom/top face offsets in meters, the size
components are log ratios, and the orientation is carried by the sine
(d_eta) and absolute cosine (d_zeta) of the yaw difference.  The direction
bit is 1 exactly when the cosine of the yaw difference is positive, so a
cosine of zero decodes to the negative branch.  Cosines within 1e-12 of
zero are snapped to exactly zero so the quarter-turn boundary lands on the
documented (d_zeta = 0, direction = 0) case despite floating-point noise;
the snap perturbs a decoded yaw by at most 1e-12.

Decoding inverts the encoding algebraically: z and h come jointly from the
decoded bottom and top faces (the log-ratio dh is redundant and unused),
and yaw is atan2(d_eta, s * d_zeta) with s = +1 for direction 1, else -1.

Corner targets are the per-corner BEV coordinate differences
(dc1..dc4, dd1..dd4) in the fixed front-left-first CCW corner order; they
are a training-only signal and are never decoded.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .boxes import OrientedBox3D, bev_corners_batch, wrap_angle
from .errors import ContractError, FormatError, NumericError

RESIDUAL_DIM = 9
CORNER_DIM = 8


@dataclass
class ResidualTargets:
    """Nine regression residuals plus the orientation direction bit."""

    values: np.ndarray  # (9,) float64
    direction: int  # 1 if cos(yaw difference) > 0 else 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (RESIDUAL_DIM,):
            raise ContractError(f"expected {RESIDUAL_DIM} residuals, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ContractError("residual targets must be finite")
        if not -1.0 <= self.values[7] <= 1.0:
            raise ContractError(f"d_eta out of [-1, 1]: {self.values[7]}")
        if not 0.0 <= self.values[8] <= 1.0:
            raise ContractError(f"d_zeta out of [0, 1]: {self.values[8]}")


def encode_residual_batch(gt_boxes, anchor_boxes):
    """Vectorized residual encoding of (N, 7) box arrays.

    Returns (residuals (N, 9), direction (N,) uint8).
    """
    g = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 7)
    a = np.asarray(anchor_boxes, dtype=np.float64).reshape(-1, 7)
    diagonal = np.sqrt(a[:, 3] ** 2 + a[:, 4] ** 2)
    yaw_diff = g[:, 6] - a[:, 6]
    cos_diff = np.cos(yaw_diff)
    cos_diff[np.abs(cos_diff) < 1e-12] = 0.0

    u = np.empty((len(g), RESIDUAL_DIM), dtype=np.float64)
    u[:, 0] = (g[:, 0] - a[:, 0]) / diagonal
    u[:, 1] = (g[:, 1] - a[:, 1]) / diagonal
    u[:, 2] = (g[:, 2] - 0.5 * g[:, 5]) - (a[:, 2] - 0.5 * a[:, 5])
    u[:, 3] = (g[:, 2] + 0.5 * g[:, 5]) - (a[:, 2] + 0.5 * a[:, 5])
    u[:, 4] = np.log(g[:, 4] / a[:, 4])
    u[:, 5] = np.log(g[:, 5] / a[:, 5])
    u[:, 6] = np.log(g[:, 3] / a[:, 3])
    u[:, 7] = np.sin(yaw_diff)
    u[:, 8] = np.abs(cos_diff)
    direction = (cos_diff > 0.0).astype(np.uint8)
    return u, direction


def decode_residual_batch(residuals, direction, anchor_boxes):
    """Invert encode_residual_batch; returns (N, 7) boxes."""
    u = np.asarray(residuals, dtype=np.float64).reshape(-1, RESIDUAL_DIM)
    d = np.asarray(direction).reshape(-1)
    a = np.asarray(anchor_boxes, dtype=np.float64).reshape(-1, 7)
    if np.any(np.abs(u[:, 7]) > 1.0):
        raise ContractError("d_eta out of [-1, 1]")

    diagonal = np.sqrt(a[:, 3] ** 2 + a[:, 4] ** 2)
    bottom = u[:, 2] + a[:, 2] - 0.5 * a[:, 5]
    top = u[:, 3] + a[:, 2] + 0.5 * a[:, 5]
    height = top - bottom
    if np.any(height <= 0.0):
        raise NumericError("decoded top face lies below the bottom face")

    out = np.empty_like(a)
    out[:, 0] = u[:, 0] * diagonal + a[:, 0]
    out[:, 1] = u[:, 1] * diagonal + a[:, 1]
    out[:, 2] = 0.5 * (top + bottom)
    out[:, 3] = a[:, 3] * np.exp(u[:, 6])
    out[:, 4] = a[:, 4] * np.exp(u[:, 4])
    out[:, 5] = height
    sign = np.where(d == 1, 1.0, -1.0)
    out[:, 6] = wrap_angle(a[:, 6] + np.arctan2(u[:, 7], sign * u[:, 8]))
    return out


def encode_residual(gt, anchor):
    """Residual targets for a single ground-truth/anchor pair."""
    u, direction = encode_residual_batch(gt.as_array()[None], anchor.as_array()[None])
    return ResidualTargets(values=u[0], direction=int(direction[0]))


def decode_residual(targets, anchor):
    """Reconstruct the ground-truth box a target encoding came from."""
    boxes = decode_residual_batch(
        targets.values[None], np.array([targets.direction]), anchor.as_array()[None]
    )
    return OrientedBox3D.from_array(boxes[0])


def encode_corners_batch(gt_boxes, anchor_boxes):
    """Corner-difference targets, (N, 8): four x deltas then four y deltas."""
    diff = bev_corners_batch(gt_boxes) - bev_corners_batch(anchor_boxes)
    return np.concatenate([diff[:, :, 0], diff[:, :, 1]], axis=1)


def encode_corners(gt, anchor):
    return encode_corners_batch(gt.as_array()[None], anchor.as_array()[None])[0]


# Flat little-endian container for target dumps consumed by external
# training stacks.  Sections are padded to 8-byte boundaries:
#   0   4s  magic b"PKTG"
#   4   u32 version (1)
#   8   u32 number of anchors K
#   12  u32 number of ground-truth boxes M
#   16  K x 9 f64 residuals
#   ...  K u8  direction bits            (padded to 8)
#   ...  K x 8 f64 corner deltas
#   ...  K i8  detection labels (1 / 0 / -1) (padded to 8)
#   ...  K u8  regression-positive flags (padded to 8)
#   ...  K i32 matched ground-truth index, -1 when unmatched (padded to 8)
TARGET_MAGIC = b"PKTG"
TARGET_VERSION = 1
_TARGET_HEADER = struct.Struct("<4sIII")


def _pad(handle, count):
    if count % 8:
        handle.write(b"\x00" * (8 - count % 8))


def write_target_file(path, residuals, direction, corners, det_labels, reg_positive, matched_gt, num_gt):
    k = len(residuals)
    with open(path, "wb") as handle:
        handle.write(_TARGET_HEADER.pack(TARGET_MAGIC, TARGET_VERSION, k, num_gt))
        handle.write(np.ascontiguousarray(residuals, dtype="<f8").tobytes())
        handle.write(np.ascontiguousarray(direction, dtype="u1").tobytes())
        _pad(handle, k)
        handle.write(np.ascontiguousarray(corners, dtype="<f8").tobytes())
        handle.write(np.ascontiguousarray(det_labels, dtype="i1").tobytes())
        _pad(handle, k)
        handle.write(np.ascontiguousarray(reg_positive, dtype="u1").tobytes())
        _pad(handle, k)
        handle.write(np.ascontiguousarray(matched_gt, dtype="<i4").tobytes())
        _pad(handle, 4 * k)


def read_target_file(path):
    raw = Path(path).read_bytes()
    if len(raw) < _TARGET_HEADER.size or raw[:4] != TARGET_MAGIC:
        raise FormatError(f"{path}: not a target container")
    _, version, k, num_gt = _TARGET_HEADER.unpack_from(raw)
    if version != TARGET_VERSION:
        raise FormatError(f"{path}: unsupported target container version {version}")

    def aligned(count):
        return count + (8 - count % 8) % 8

    cursor = _TARGET_HEADER.size
    residuals = np.frombuffer(raw, dtype="<f8", count=k * RESIDUAL_DIM, offset=cursor).reshape(-1, RESIDUAL_DIM)
    cursor += residuals.nbytes
    direction = np.frombuffer(raw, dtype="u1", count=k, offset=cursor).copy()
    cursor += aligned(k)
    corners = np.frombuffer(raw, dtype="<f8", count=k * CORNER_DIM, offset=cursor).reshape(-1, CORNER_DIM)
    cursor += corners.nbytes
    det_labels = np.frombuffer(raw, dtype="i1", count=k, offset=cursor).copy()
    cursor += aligned(k)
    reg_positive = np.frombuffer(raw, dtype="u1", count=k, offset=cursor).copy()
    cursor += aligned(k)
    matched_gt = np.frombuffer(raw, dtype="<i4", count=k, offset=cursor).copy()
    return {
        "residuals": residuals.copy(),
        "direction": direction,
        "corners": corners.copy(),
        "det_labels": det_labels,
        "reg_positive": reg_positive,
        "matched_gt": matched_gt,
        "num_gt": int(num_gt),
    }
