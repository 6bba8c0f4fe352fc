"""Anchor grids, target assignment, residual/corner codecs, balanced sampling."""

import numpy as np

from patchkit.anchors import AnchorGridSpec, generate_anchors, match_anchors, sample_balanced
from patchkit.boxes import OrientedBox3D
from patchkit.codec import decode_residual, encode_corners, encode_residual

# The refinement head sees a 32 x 32 grid with two orientations per cell.
spec = AnchorGridSpec.for_patch(center=(0.0, 0.0))
anchors = generate_anchors(spec)
print(f"{len(anchors)} anchors, stride {spec.stride} m, dims {spec.anchor_dims}")

# Assignment: surpass IoU 0.6 -> detection positive, at or below 0.45 ->
# negative, in between -> ignored; regression keeps everything above 0.45.
truth = np.array([[0.4, -0.3, -1.0, 3.9, 1.7, 1.5, 0.25]])
match = match_anchors(anchors, truth)
print(
    "positives:", len(match.positive_indices),
    "ignored:", int(np.sum(match.det_label == 0)),
    "negatives:", len(match.negative_indices),
    "regression positives:", len(match.reg_indices),
)

# Residual targets: normalized offsets, log sizes, sine/|cosine| orientation
# with a direction bit; decoding is the exact algebraic inverse.
gt_box = OrientedBox3D.from_array(truth[0])
anchor = OrientedBox3D.from_array(anchors[match.positive_indices[0]])
targets = encode_residual(gt_box, anchor)
print("\nresiduals:", np.round(targets.values, 4), "direction:", targets.direction)
decoded = decode_residual(targets, anchor)
print("decode roundtrip error:", np.max(np.abs(decoded.as_array() - gt_box.as_array())))

# Corner deltas are auxiliary training targets only (never decoded).
print("corner deltas:", np.round(encode_corners(gt_box, anchor), 3))

# The detection head trains on a seeded 1:3 positive:negative sample.
sample = sample_balanced(match, n_total=512, seed=0)
print(f"\nsampled {len(sample.positive)} positives + {len(sample.negative)} negatives")
