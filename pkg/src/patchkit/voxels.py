"""Sparse voxel grouping and network-boundary feature encoding.

Only non-empty voxels are ever materialized; per-voxel point groups stay
ragged (no zero padding).  Encoded features carry seven channels per point:
absolute x, y, z, reflectance, and the offsets to the voxel's point
centroid.  The whole sample is then standardized per channel over its real
points; channels with a standard deviation below 1e-6 are mean-centered
only.

``write_encoded_sample`` defines the flat little-endian container used to
hand samples to training stacks:

    offset  type        content
    0       4s          magic b"PKVX"
    4       u32         container version (1)
    8       u32         number of voxels V
    12      u32         channels per point C (7)
    16      u64         total stored points P
    24      3 x u32     grid dimensions (nx, ny, nz)
    36      V x 3 i32   voxel coordinates, first-seen order
    ...     V x u32     per-voxel point counts
    ...     P x C f64   features, voxel-major, intra-voxel point order
    ...     C f64       per-channel means used for normalization
    ...     C f64       per-channel standard deviations used
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError, FormatError
from .kitti import PointCloud

FEATURE_CHANNELS = 7
STD_FLOOR = 1e-6

CONTAINER_MAGIC = b"PKVX"
CONTAINER_VERSION = 1


@dataclass
class VoxelGridConfig:
    origin: tuple  # (x, y, z) meters, minimum corner
    extent: tuple  # (X, Y, Z) meters
    voxel_size: tuple  # (vx, vy, vz) meters
    max_points_per_voxel: int
    max_voxels: int

    def __post_init__(self):
        if self.max_points_per_voxel < 1:
            raise ContractError("max_points_per_voxel must be at least 1")
        if self.max_voxels < 1:
            raise ContractError("max_voxels must be at least 1")
        for extent, size in zip(self.extent, self.voxel_size):
            ratio = extent / size
            if abs(ratio - round(ratio)) > 1e-9:
                raise ContractError(
                    f"extent {extent} is not an integer multiple of voxel size {size}"
                )

    @property
    def grid_dims(self):
        return tuple(int(round(e / s)) for e, s in zip(self.extent, self.voxel_size))

    def with_center(self, cx, cy):
        """Same grid with its x/y footprint centered on (cx, cy)."""
        return VoxelGridConfig(
            origin=(cx - 0.5 * self.extent[0], cy - 0.5 * self.extent[1], self.origin[2]),
            extent=self.extent,
            voxel_size=self.voxel_size,
            max_points_per_voxel=self.max_points_per_voxel,
            max_voxels=self.max_voxels,
        )


def preset_lrn(max_points_per_voxel=35):
    """Refinement-stage grid: 9.6 m x 9.6 m x 4 m patch, 64 x 64 x 19 voxels.

    The x/y footprint is centered on the patch; callers re-center it on a
    crop center via ``with_center``.
    """
    return VoxelGridConfig(
        origin=(-4.8, -4.8, -3.0),
        extent=(9.6, 9.6, 4.0),
        voxel_size=(0.15, 0.15, 4.0 / 19.0),
        max_points_per_voxel=max_points_per_voxel,
        max_voxels=64 * 64 * 19,
    )


def preset_rpn(max_points_per_voxel=35):
    """Proposal-stage grid: full scene, 352 x 400 x 2 voxels."""
    return VoxelGridConfig(
        origin=(0.0, -40.0, -3.0),
        extent=(70.4, 80.0, 4.0),
        voxel_size=(0.2, 0.2, 2.0),
        max_points_per_voxel=max_points_per_voxel,
        max_voxels=352 * 400 * 2,
    )


@dataclass
class SparseVoxelSet:
    """Occupied voxels in first-seen order with capped point membership."""

    coords: np.ndarray  # (V, 3) int32
    point_indices: list  # V arrays of indices into the source cloud
    grid_dims: tuple

    def __len__(self):
        return len(self.coords)

    @property
    def counts(self):
        return np.array([len(ix) for ix in self.point_indices], dtype=np.int64)

    @property
    def entries(self):
        return {tuple(c): ix for c, ix in zip(map(tuple, self.coords), self.point_indices)}


def group_points(cloud, config, overflow="first", seed=None):
    """Group points into voxels: floor((p - origin) / voxel_size).

    Points outside the grid extent are dropped.  When a voxel exceeds
    ``max_points_per_voxel``, the ``overflow`` policy decides membership:
    ``"first"`` keeps the earliest points in cloud order (the default,
    deterministic), ``"random"`` keeps a seeded uniform subsample (returned
    in ascending cloud order).  Once ``max_voxels`` distinct voxels exist,
    points opening new voxels are dropped.
    """
    if overflow not in ("first", "random"):
        raise ContractError(f"unknown overflow policy {overflow!r}")
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    dims = config.grid_dims
    origin = np.asarray(config.origin, dtype=np.float64)
    size = np.asarray(config.voxel_size, dtype=np.float64)

    if len(pts) == 0:
        return SparseVoxelSet(np.empty((0, 3), dtype=np.int32), [], dims)

    idx = np.floor((pts[:, :3] - origin) / size).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < np.asarray(dims)), axis=1)
    kept = np.nonzero(inside)[0]
    if kept.size == 0:
        return SparseVoxelSet(np.empty((0, 3), dtype=np.int32), [], dims)
    idx = idx[kept]

    # Flat keys let np.unique group points; first-occurrence positions
    # restore the first-seen voxel order that the flat sort destroys.
    keys = (idx[:, 0] * dims[1] + idx[:, 1]) * dims[2] + idx[:, 2]
    unique_keys, first_pos, inverse = np.unique(keys, return_index=True, return_inverse=True)
    voxel_rank = np.argsort(np.argsort(first_pos, kind="stable"), kind="stable")

    order = np.argsort(inverse, kind="stable")  # groups voxels, keeps cloud order inside
    boundaries = np.searchsorted(inverse[order], np.arange(len(unique_keys)))
    boundaries = np.append(boundaries, len(order))

    n_voxels = min(len(unique_keys), config.max_voxels)
    coords = np.empty((n_voxels, 3), dtype=np.int32)
    members = [None] * n_voxels
    rng = np.random.default_rng(seed) if overflow == "random" else None
    for u, rank in enumerate(voxel_rank):
        if rank >= config.max_voxels:
            continue
        group = order[boundaries[u] : boundaries[u + 1]]
        if len(group) > config.max_points_per_voxel:
            if overflow == "first":
                group = group[: config.max_points_per_voxel]
            else:
                group = np.sort(rng.choice(group, config.max_points_per_voxel, replace=False))
        coords[rank] = idx[group[0]]
        members[rank] = kept[group]
    return SparseVoxelSet(coords, members, dims)


@dataclass
class EncodedSample:
    """Ragged per-voxel features plus the normalization stats applied."""

    coords: np.ndarray  # (V, 3) int32
    counts: np.ndarray  # (V,) int64
    features: np.ndarray  # (P, 7) float64, voxel-major
    mean: np.ndarray  # (7,) per-channel mean before normalization
    std: np.ndarray  # (7,) per-channel stddev before normalization
    grid_dims: tuple
    offsets: np.ndarray = field(init=False)  # (V + 1,) prefix sums of counts

    def __post_init__(self):
        self.offsets = np.concatenate([[0], np.cumsum(self.counts)]).astype(np.int64)

    def voxel_features(self, i):
        return self.features[self.offsets[i] : self.offsets[i + 1]]

    def to_dict(self):
        """JSON-ready dict (used by the CLI dump commands)."""
        return {
            "grid_dims": list(self.grid_dims),
            "coords": self.coords.tolist(),
            "counts": self.counts.tolist(),
            "features": self.features.tolist(),
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
        }


def encode_sample(voxels, cloud):
    """Build normalized per-point features for every occupied voxel."""
    if len(voxels) == 0:
        raise DataError("cannot encode an empty voxel set")
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)

    blocks = []
    for indices in voxels.point_indices:
        group = pts[indices, :4].astype(np.float64)
        centroid = group[:, :3].mean(axis=0)
        blocks.append(np.hstack([group, group[:, :3] - centroid]))
    features = np.vstack(blocks)

    mean = features.mean(axis=0)
    std = features.std(axis=0)
    scale = np.where(std < STD_FLOOR, 1.0, std)
    features = (features - mean) / scale
    return EncodedSample(
        coords=voxels.coords.copy(),
        counts=voxels.counts,
        features=features,
        mean=mean,
        std=std,
        grid_dims=voxels.grid_dims,
    )


_HEADER = struct.Struct("<4sIIIQIII")


def write_encoded_sample(path, sample):
    """Serialize an EncodedSample into the documented container."""
    coords = np.ascontiguousarray(sample.coords, dtype="<i4")
    counts = np.ascontiguousarray(sample.counts, dtype="<u4")
    features = np.ascontiguousarray(sample.features, dtype="<f8")
    header = _HEADER.pack(
        CONTAINER_MAGIC,
        CONTAINER_VERSION,
        len(sample.coords),
        FEATURE_CHANNELS,
        len(sample.features),
        *sample.grid_dims,
    )
    with open(path, "wb") as handle:
        handle.write(header)
        handle.write(coords.tobytes())
        handle.write(counts.tobytes())
        handle.write(features.tobytes())
        handle.write(np.asarray(sample.mean, dtype="<f8").tobytes())
        handle.write(np.asarray(sample.std, dtype="<f8").tobytes())


def read_encoded_sample(path):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size or raw[:4] != CONTAINER_MAGIC:
        raise FormatError(f"{path}: not an encoded-sample container")
    magic, version, n_voxels, channels, n_points, nx, ny, nz = _HEADER.unpack_from(raw)
    if version != CONTAINER_VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    cursor = _HEADER.size
    coords = np.frombuffer(raw, dtype="<i4", count=n_voxels * 3, offset=cursor).reshape(-1, 3)
    cursor += coords.nbytes
    counts = np.frombuffer(raw, dtype="<u4", count=n_voxels, offset=cursor).astype(np.int64)
    cursor += n_voxels * 4
    features = np.frombuffer(raw, dtype="<f8", count=n_points * channels, offset=cursor)
    features = features.reshape(-1, channels)
    cursor += features.nbytes
    mean = np.frombuffer(raw, dtype="<f8", count=channels, offset=cursor)
    cursor += mean.nbytes
    std = np.frombuffer(raw, dtype="<f8", count=channels, offset=cursor)
    return EncodedSample(
        coords=coords.astype(np.int32),
        counts=counts,
        features=features.copy(),
        mean=mean.copy(),
        std=std.copy(),
        grid_dims=(int(nx), int(ny), int(nz)),
    )
