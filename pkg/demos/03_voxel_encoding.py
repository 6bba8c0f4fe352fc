"""Sparse voxel grouping and the normalized network-input features."""

import tempfile
from pathlib import Path

import numpy as np

from patchkit.voxels import (
    encode_sample,
    group_points,
    preset_lrn,
    preset_rpn,
    read_encoded_sample,
    write_encoded_sample,
)

print("refinement grid:", preset_lrn().grid_dims, "voxel", preset_lrn().voxel_size)
print("proposal grid:  ", preset_rpn().grid_dims, "voxel", preset_rpn().voxel_size)

# A fake patch: ground plane plus a dense blob, centered at the origin.
rng = np.random.default_rng(3)
ground = np.column_stack(
    [rng.uniform(-4.8, 4.8, 6000), rng.uniform(-4.8, 4.8, 6000), np.full(6000, -1.7), rng.uniform(0, 1, 6000)]
)
blob = np.column_stack(
    [rng.normal(0, 0.8, 2000), rng.normal(0, 0.4, 2000), rng.uniform(-1.6, -0.2, 2000), rng.uniform(0, 1, 2000)]
)
points = np.vstack([ground, blob])

grid = preset_lrn()  # origin already centered on the patch
voxels = group_points(points, grid)
print(f"\n{len(points)} points -> {len(voxels)} occupied voxels (of {np.prod(grid.grid_dims)})")
print("fullest voxel holds", int(voxels.counts.max()), "points (cap", grid.max_points_per_voxel, ")")

# Features: absolute x, y, z, reflectance + offsets to the voxel centroid,
# standardized per channel over the sample. No zero padding anywhere.
sample = encode_sample(voxels, points)
print("\nfeature block shape:", sample.features.shape)
print("channel means (should be ~0):", np.round(sample.features.mean(axis=0), 9))
print("stored normalization mean:   ", np.round(sample.mean, 3))

# The flat container is the hand-off format for training stacks.
path = Path(tempfile.mkdtemp()) / "sample.bin"
write_encoded_sample(path, sample)
back = read_encoded_sample(path)
print(f"\ncontainer roundtrip OK: {np.array_equal(back.features, sample.features)} ({path.stat().st_size} bytes)")
