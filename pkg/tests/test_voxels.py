import numpy as np
import pytest

from patchkit.errors import ContractError, DataError, FormatError
from patchkit.oracles import naive_group_points
from patchkit.voxels import (
    VoxelGridConfig,
    encode_sample,
    group_points,
    preset_lrn,
    preset_rpn,
    read_encoded_sample,
    write_encoded_sample,
)


def small_grid(**overrides):
    defaults = dict(
        origin=(-5.0, -5.0, -2.0),
        extent=(10.0, 10.0, 4.0),
        voxel_size=(0.5, 0.5, 1.0),
        max_points_per_voxel=8,
        max_voxels=1000,
    )
    defaults.update(overrides)
    return VoxelGridConfig(**defaults)


def random_cloud(rng, n=10_000):
    return np.column_stack(
        [
            rng.uniform(-6.0, 6.0, n),
            rng.uniform(-6.0, 6.0, n),
            rng.uniform(-3.0, 3.0, n),
            rng.uniform(0.0, 1.0, n),
        ]
    )


class TestConfig:
    def test_non_integer_grid_rejected(self):
        with pytest.raises(ContractError):
            small_grid(extent=(10.1, 10.0, 4.0))

    def test_zero_cap_rejected(self):
        with pytest.raises(ContractError):
            small_grid(max_points_per_voxel=0)

    def test_with_center(self):
        grid = preset_lrn().with_center(10.0, -3.0)
        assert grid.origin == (10.0 - 4.8, -3.0 - 4.8, -3.0)
        assert grid.grid_dims == (64, 64, 19)


class TestPresets:
    def test_refinement_grid(self):
        grid = preset_lrn()
        assert grid.grid_dims == (64, 64, 19)
        assert grid.voxel_size[2] * 19 == pytest.approx(4.0)
        assert grid.extent[0] / grid.voxel_size[0] == pytest.approx(64)
        assert grid.max_points_per_voxel == 35

    def test_proposal_grid(self):
        grid = preset_rpn()
        assert grid.grid_dims == (352, 400, 2)
        assert grid.voxel_size[2] == pytest.approx(2.0)


class TestGrouping:
    def test_single_point(self):
        grid = small_grid(origin=(0.0, 0.0, 0.0), extent=(1.0, 1.0, 1.0), voxel_size=(1.0, 1.0, 1.0))
        voxels = group_points(np.array([[0.01, 0.01, 0.01, 0.5]]), grid)
        assert len(voxels) == 1
        assert tuple(voxels.coords[0]) == (0, 0, 0)
        assert list(voxels.point_indices[0]) == [0]

    def test_cap_keeps_first_35(self):
        # Default per-voxel budget of the encoding stage.
        grid = small_grid(
            origin=(0.0, 0.0, 0.0), extent=(1.0, 1.0, 1.0), voxel_size=(1.0, 1.0, 1.0),
            max_points_per_voxel=35,
        )
        points = np.tile([[0.5, 0.5, 0.5, 0.1]], (40, 1))
        voxels = group_points(points, grid)
        assert len(voxels) == 1
        assert list(voxels.point_indices[0]) == list(range(35))

    def test_matches_naive_oracle(self, rng):
        grid = small_grid(max_points_per_voxel=6)
        points = random_cloud(rng)
        voxels = group_points(points, grid)
        coords, members = naive_group_points(points, grid)
        assert [tuple(c) for c in voxels.coords] == coords
        for coord in coords:
            assert list(voxels.entries[coord]) == members[coord]

    def test_max_voxels_drops_late_voxels(self, rng):
        grid = small_grid(max_voxels=20)
        points = random_cloud(rng, n=2000)
        voxels = group_points(points, grid)
        coords, members = naive_group_points(points, grid)
        assert len(voxels) == 20
        assert [tuple(c) for c in voxels.coords] == coords

    def test_out_of_extent_dropped(self):
        grid = small_grid()
        points = np.array([[100.0, 0.0, 0.0, 0.2], [0.0, 0.0, 0.0, 0.3]])
        voxels = group_points(points, grid)
        assert sum(len(ix) for ix in voxels.point_indices) == 1

    def test_counts_bounded_by_input(self, rng):
        grid = small_grid(max_points_per_voxel=4)
        points = random_cloud(rng, n=3000)
        voxels = group_points(points, grid)
        assert voxels.counts.sum() <= 3000

    def test_roundtrip_containment(self, rng):
        grid = small_grid()
        points = random_cloud(rng, n=3000)
        voxels = group_points(points, grid)
        origin = np.asarray(grid.origin)
        size = np.asarray(grid.voxel_size)
        for coord, indices in voxels.entries.items():
            back = np.floor((points[indices, :3] - origin) / size).astype(int)
            assert np.all(back == np.asarray(coord))

    def test_permutation_covariance(self, rng):
        """Permuting input points only permutes intra-voxel membership."""
        grid = small_grid(max_points_per_voxel=100)  # no cap interference
        points = random_cloud(rng, n=2000)
        perm = rng.permutation(2000)
        voxels_a = group_points(points, grid)
        voxels_b = group_points(points[perm], grid)
        sets_a = {c: set(ix.tolist()) for c, ix in voxels_a.entries.items()}
        sets_b = {c: set(perm[ix].tolist()) for c, ix in voxels_b.entries.items()}
        assert sets_a == sets_b

    def test_random_overflow_mode(self, rng):
        grid = small_grid(origin=(0.0, 0.0, 0.0), extent=(1.0, 1.0, 1.0), voxel_size=(1.0, 1.0, 1.0), max_points_per_voxel=5)
        points = rng.uniform(0.001, 0.999, size=(50, 4))
        a = group_points(points, grid, overflow="random", seed=5)
        b = group_points(points, grid, overflow="random", seed=5)
        c = group_points(points, grid, overflow="random", seed=6)
        assert list(a.point_indices[0]) == list(b.point_indices[0])
        assert list(a.point_indices[0]) != list(c.point_indices[0])
        assert len(a.point_indices[0]) == 5

    def test_unknown_policy(self):
        with pytest.raises(ContractError):
            group_points(np.zeros((1, 4)), small_grid(), overflow="bogus")


class TestEncoding:
    def test_single_point_features_centered(self):
        grid = small_grid(origin=(0.0, 0.0, 0.0), extent=(1.0, 1.0, 1.0), voxel_size=(1.0, 1.0, 1.0))
        points = np.array([[0.2, 0.3, 0.4, 0.7]])
        sample = encode_sample(group_points(points, grid), points)
        # One point: offsets to its own centroid are zero, and every channel
        # is degenerate, so mean-centering zeroes everything.
        np.testing.assert_array_equal(sample.features, np.zeros((1, 7)))
        np.testing.assert_allclose(sample.mean[:4], [0.2, 0.3, 0.4, 0.7])

    def test_standardization(self, rng):
        grid = small_grid()
        points = random_cloud(rng, n=5000)
        sample = encode_sample(group_points(points, grid), points)
        np.testing.assert_allclose(sample.features.mean(axis=0), 0.0, atol=1e-6)
        np.testing.assert_allclose(sample.features.std(axis=0), 1.0, atol=1e-6)

    def test_two_voxel_hand_case(self):
        """Oracle: features computed by hand for three points in two voxels."""
        grid = small_grid(origin=(0.0, 0.0, 0.0), extent=(2.0, 1.0, 1.0), voxel_size=(1.0, 1.0, 1.0))
        points = np.array(
            [
                [0.2, 0.5, 0.5, 0.1],  # voxel (0,0,0)
                [0.4, 0.5, 0.5, 0.3],  # voxel (0,0,0)
                [1.5, 0.5, 0.5, 0.9],  # voxel (1,0,0)
            ]
        )
        sample = encode_sample(group_points(points, grid), points)
        # Raw features: centroid of voxel 0 is (0.3, 0.5, 0.5).
        raw = np.array(
            [
                [0.2, 0.5, 0.5, 0.1, -0.1, 0.0, 0.0],
                [0.4, 0.5, 0.5, 0.3, 0.1, 0.0, 0.0],
                [1.5, 0.5, 0.5, 0.9, 0.0, 0.0, 0.0],
            ]
        )
        mean = raw.mean(axis=0)
        std = raw.std(axis=0)
        expected = (raw - mean) / np.where(std < 1e-6, 1.0, std)
        np.testing.assert_allclose(sample.features, expected, atol=1e-12)
        np.testing.assert_allclose(sample.mean, mean, atol=1e-12)
        assert sample.grid_dims == (2, 1, 1)

    def test_empty_sample_rejected(self):
        grid = small_grid()
        voxels = group_points(np.empty((0, 4)), grid)
        with pytest.raises(DataError):
            encode_sample(voxels, np.empty((0, 4)))

    def test_no_padding_present(self, rng):
        grid = small_grid(max_points_per_voxel=7)
        points = random_cloud(rng, n=4000)
        voxels = group_points(points, grid)
        sample = encode_sample(voxels, points)
        assert len(sample.features) == voxels.counts.sum()
        assert sample.features.shape[1] == 7


class TestContainer:
    def test_roundtrip(self, tmp_path, rng):
        grid = small_grid()
        points = random_cloud(rng, n=3000)
        sample = encode_sample(group_points(points, grid), points)
        path = tmp_path / "sample.bin"
        write_encoded_sample(path, sample)
        back = read_encoded_sample(path)
        np.testing.assert_array_equal(back.coords, sample.coords)
        np.testing.assert_array_equal(back.counts, sample.counts)
        np.testing.assert_array_equal(back.features, sample.features)
        np.testing.assert_array_equal(back.mean, sample.mean)
        np.testing.assert_array_equal(back.std, sample.std)
        assert back.grid_dims == tuple(sample.grid_dims)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"nope" + b"\x00" * 64)
        with pytest.raises(FormatError):
            read_encoded_sample(path)
