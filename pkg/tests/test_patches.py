import math

import numpy as np
import pytest

from patchkit.boxes import OrientedBox3D, points_in_box, rotate_about_z
from patchkit.config import RunConfig
from patchkit.errors import ContractError, DataError, FormatError
from patchkit.kitti import Difficulty
from patchkit.patches import (
    AugmentationLog,
    CropNoise,
    LabeledFrame,
    ObjectEntry,
    Patch,
    PatchDatabase,
    SurfaceEntry,
    augment,
    build_object_surface_lists,
    build_training_patch,
    crop_patch,
    deserialize_patch_record,
    extract_inference_patch,
    load_labeled_frame,
    pair_object_with_surface,
    place_object_on_surface,
    sample_crop_noise,
    serialize_patch_record,
    write_patch_database,
)
from patchkit.refinement import Proposal

# Augmentation seeds with known draw patterns (draw order: global mirror,
# global scale, object mirror, object scale, rotation).
SEED_PLAIN = 4  # no mirrors
SEED_GLOBAL_MIRROR = 2
SEED_OBJECT_MIRROR = 0


def one_car_frame(rng, car=None, frame_id="000000"):
    car = car or OrientedBox3D(10.0, 2.0, -1.0, 4.0, 1.8, 1.5, 0.4)
    ground = np.column_stack(
        [
            rng.uniform(car.cx - 6, car.cx + 6, 4000),
            rng.uniform(car.cy - 6, car.cy + 6, 4000),
            np.full(4000, -1.75) + rng.normal(0, 0.01, 4000),
            rng.uniform(0, 1, 4000),
        ]
    )
    local = rng.uniform(-0.5, 0.5, (300, 3)) * [car.l, car.w, car.h]
    c, s = math.cos(car.yaw), math.sin(car.yaw)
    car_pts = np.column_stack(
        [
            car.cx + local[:, 0] * c - local[:, 1] * s,
            car.cy + local[:, 0] * s + local[:, 1] * c,
            car.cz + local[:, 2],
            rng.uniform(0, 1, 300),
        ]
    )
    return LabeledFrame(
        frame_id=frame_id,
        points=np.vstack([ground, car_pts]),
        boxes=[car],
        classes=["Car"],
        difficulties=[Difficulty.MODERATE],
    )


class TestObjectSurfaceLists:
    def test_one_car_frame(self, rng):
        frame = one_car_frame(rng)
        objects, surfaces = build_object_surface_lists([frame])
        assert len(objects) == 1 and len(surfaces) == 1
        obj, surface = objects[0], surfaces[0]
        assert len(obj.points) >= 300  # all car points captured
        assert obj.distance == pytest.approx(math.hypot(10.0, 2.0))
        # Surface must contain no point of the (margin-enlarged) car box.
        assert len(points_in_box(surface.points, rotate_about_z(frame.boxes[0], -math.atan2(2.0, 10.0)), 0.2)) == 0

    def test_surface_center_on_depth_axis(self, rng):
        _, surfaces = build_object_surface_lists([one_car_frame(rng)])
        assert abs(math.atan2(surfaces[0].center_xy[1], surfaces[0].center_xy[0])) < 1e-9

    def test_vertical_reference_is_bottom_face(self, rng):
        objects, surfaces = build_object_surface_lists([one_car_frame(rng)])
        assert surfaces[0].vertical_reference == pytest.approx(objects[0].box.bottom_z)

    def test_lists_sorted_by_distance(self, dataset):
        frames = [load_labeled_frame(dataset, f"{i:06d}") for i in range(4)]
        objects, surfaces = build_object_surface_lists(frames)
        distances_o = [o.distance for o in objects]
        distances_s = [s.distance for s in surfaces]
        assert distances_o == sorted(distances_o)
        assert distances_s == sorted(distances_s)

    def test_ignored_difficulty_skipped(self, rng):
        frame = one_car_frame(rng)
        frame.difficulties = [Difficulty.IGNORED]
        objects, surfaces = build_object_surface_lists([frame])
        assert objects == [] and surfaces == []

    def test_other_classes_removed_but_not_listed(self, rng):
        frame = one_car_frame(rng)
        pedestrian = OrientedBox3D(8.0, 0.0, -1.2, 0.8, 0.8, 1.8, 0.0)
        frame.boxes.append(pedestrian)
        frame.classes.append("Pedestrian")
        frame.difficulties.append(Difficulty.EASY)
        objects, surfaces = build_object_surface_lists([frame])
        assert len(objects) == 1  # only the car becomes an entry
        azim = math.atan2(frame.boxes[0].cy, frame.boxes[0].cx)
        assert len(points_in_box(surfaces[0].points, rotate_about_z(pedestrian, -azim), 0.2)) == 0


class TestPairing:
    def _lists(self, rng):
        frames = [one_car_frame(rng, OrientedBox3D(6.0 + 3 * i, (-1) ** i * 2.0, -1.0, 4.0, 1.8, 1.5, 0.2 * i), f"{i:06d}") for i in range(6)]
        return build_object_surface_lists(frames)

    def test_easy_always_resampled(self, rng):
        objects, surfaces = self._lists(rng)
        obj = objects[0]
        obj.difficulty = Difficulty.EASY
        for seed in range(30):
            chosen = pair_object_with_surface(obj, surfaces, seed=seed, window=3)
            gaps = sorted(abs(s.distance - obj.distance) for s in surfaces)
            assert abs(chosen.distance - obj.distance) <= gaps[2] + 1e-12

    def test_hard_keep_branch(self, rng):
        # default_rng(0).random() = 0.6369... >= 0.6 takes the keep branch.
        objects, surfaces = self._lists(rng)
        obj = objects[2]
        obj.difficulty = Difficulty.HARD
        assert pair_object_with_surface(obj, surfaces, seed=0) is obj.own_surface

    def test_hard_resample_branch(self, rng):
        # default_rng(1).random() = 0.5118... < 0.6 resamples.
        objects, surfaces = self._lists(rng)
        obj = objects[2]
        obj.difficulty = Difficulty.HARD
        chosen = pair_object_with_surface(obj, surfaces, seed=1)
        assert isinstance(chosen, SurfaceEntry)

    def test_window_contract(self, rng):
        objects, surfaces = self._lists(rng)
        obj = objects[3]
        obj.difficulty = Difficulty.EASY
        window = 2
        gaps = sorted(abs(s.distance - obj.distance) for s in surfaces)
        for seed in range(40):
            chosen = pair_object_with_surface(obj, surfaces, seed=seed, window=window)
            assert abs(chosen.distance - obj.distance) <= gaps[window - 1] + 1e-12

    def test_seed_determinism(self, rng):
        objects, surfaces = self._lists(rng)
        a = pair_object_with_surface(objects[1], surfaces, seed=7)
        b = pair_object_with_surface(objects[1], surfaces, seed=7)
        assert a is b


class TestPlacement:
    def _object(self, rng, bottom=-1.7):
        box = OrientedBox3D(12.0, 5.0, bottom + 0.75, 4.0, 1.8, 1.5, 0.3)
        pts = rng.uniform(-0.4, 0.4, (50, 3)) * [box.l, box.w, box.h] + [0, 0, 0]
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        world = np.column_stack(
            [
                box.cx + pts[:, 0] * c - pts[:, 1] * s,
                box.cy + pts[:, 0] * s + pts[:, 1] * c,
                box.cz + pts[:, 2],
                rng.uniform(0, 1, 50),
            ]
        )
        surface = SurfaceEntry(
            points=rng.uniform(0, 1, (200, 4)) + [12.0, 0, -2.0, 0],
            center_xy=(13.0, 0.0),
            vertical_reference=-1.5,
            distance=13.0,
            frame_id="000001",
            object_index=0,
        )
        return (
            ObjectEntry(
                points=world,
                box=box,
                frame_id="000000",
                object_index=0,
                distance=box.bev_distance,
                difficulty=Difficulty.EASY,
                own_surface=surface,
            ),
            surface,
        )

    def test_vertical_shift(self, rng):
        obj, surface = self._object(rng, bottom=-1.7)
        merged, box = place_object_on_surface(obj, surface)
        # bottom -1.7 raised to the stored reference -1.5: +0.2 shift.
        assert box.bottom_z == pytest.approx(-1.5, abs=1e-12)
        object_z = merged[len(surface.points):, 2]
        original_z = obj.points[:, 2]
        np.testing.assert_allclose(object_z - original_z, 0.2, atol=1e-12)

    def test_counts_add_up(self, rng):
        obj, surface = self._object(rng)
        merged, _ = place_object_on_surface(obj, surface)
        assert len(merged) == len(surface.points) + len(obj.points)

    def test_object_lands_at_surface_center(self, rng):
        obj, surface = self._object(rng)
        _, box = place_object_on_surface(obj, surface)
        assert (box.cx, box.cy) == pytest.approx(surface.center_xy, abs=1e-12)


class TestAugment:
    def _patch(self, rng):
        box = OrientedBox3D(10.0, 0.0, -1.0, 4.0, 1.8, 1.5, 0.4)
        surface = rng.uniform(-4, 4, (500, 4)) + [10.0, 0.0, -1.7, 0.5]
        obj_local = rng.uniform(-0.45, 0.45, (80, 3)) * [box.l, box.w, box.h]
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        obj = np.column_stack(
            [
                box.cx + obj_local[:, 0] * c - obj_local[:, 1] * s,
                box.cy + obj_local[:, 0] * s + obj_local[:, 1] * c,
                box.cz + obj_local[:, 2],
                rng.uniform(0, 1, 80),
            ]
        )
        points = np.vstack([surface, obj])
        return points, box, np.arange(500, 580)

    def test_degenerate_ranges_are_identity(self, rng):
        points, box, obj_idx = self._patch(rng)
        out_points, out_box, log = augment(
            points, box, seed=123, object_indices=obj_idx,
            mirror_prob=0.0, scale_range=(1.0, 1.0), rotation_range=0.0,
        )
        np.testing.assert_array_equal(out_points, points)
        np.testing.assert_array_equal(out_box.as_array(), box.as_array())
        assert log.global_scale == 1.0 and log.global_rotation == 0.0

    def test_global_mirror_algebra(self, rng):
        points, box, obj_idx = self._patch(rng)
        out_points, out_box, log = augment(
            points, box, seed=SEED_GLOBAL_MIRROR, object_indices=obj_idx,
            scale_range=(1.0, 1.0), rotation_range=0.0,
        )
        assert log.global_mirror and not log.object_mirror
        assert out_box.cy == pytest.approx(-box.cy)
        assert out_box.yaw == pytest.approx(-box.yaw)
        np.testing.assert_allclose(out_points[:, 1], -points[:, 1], atol=1e-12)

    def test_object_mirror_keeps_points_in_box(self, rng):
        points, box, obj_idx = self._patch(rng)
        out_points, out_box, log = augment(
            points, box, seed=SEED_OBJECT_MIRROR, object_indices=obj_idx,
            scale_range=(1.0, 1.0), rotation_range=0.0,
        )
        assert log.object_mirror and not log.global_mirror
        assert out_box.as_array() == pytest.approx(box.as_array())
        # Non-object points untouched; object points stay inside the box.
        np.testing.assert_array_equal(out_points[:500], points[:500])
        assert len(points_in_box(out_points[obj_idx], out_box, 0.0)) == len(obj_idx)

    def test_rotation_shifts_azimuth_and_preserves_distances(self, rng):
        points, box, obj_idx = self._patch(rng)
        out_points, out_box, log = augment(
            points, box, seed=SEED_PLAIN, object_indices=obj_idx,
            mirror_prob=0.5, scale_range=(1.0, 1.0), rotation_range=math.pi / 2,
        )
        assert not log.global_mirror and not log.object_mirror
        azimuth_before = math.atan2(box.cy, box.cx)
        azimuth_after = math.atan2(out_box.cy, out_box.cx)
        assert azimuth_after - azimuth_before == pytest.approx(log.global_rotation, abs=1e-12)
        before = np.linalg.norm(points[::7, None, :3] - points[None, ::7, :3], axis=2)
        after = np.linalg.norm(out_points[::7, None, :3] - out_points[None, ::7, :3], axis=2)
        np.testing.assert_allclose(after, before, atol=1e-9)

    def test_rotation_bounded_and_audit_fields_zero(self, rng):
        points, box, obj_idx = self._patch(rng)
        for seed in range(100):
            _, _, log = augment(points[::20], box, seed=seed, object_indices=None)
            assert abs(log.global_rotation) <= math.pi / 2
            assert 0.95 <= log.global_scale <= 1.05
            assert 0.95 <= log.object_scale <= 1.05
            assert log.object_rotation == 0.0
            assert log.vertical_shift == 0.0

    def test_scale_applies_everywhere(self, rng):
        points, box, obj_idx = self._patch(rng)
        out_points, out_box, log = augment(
            points, box, seed=SEED_PLAIN, object_indices=obj_idx,
            mirror_prob=0.0, scale_range=(1.02, 1.02), rotation_range=0.0,
        )
        np.testing.assert_allclose(out_points[:500, :3], points[:500, :3] * 1.02, atol=1e-12)
        assert out_box.l == pytest.approx(box.l * 1.02 * log.object_scale)
        # Reflectance is never scaled.
        np.testing.assert_array_equal(out_points[:, 3], points[:, 3])


class TestCrop:
    def test_zero_noise_centers_on_object(self, rng):
        points = rng.uniform(-10, 30, (2000, 4))
        box = OrientedBox3D(10.0, 3.0, -1.0, 4.0, 1.8, 1.5, 0.2)
        patch = crop_patch(points, box, CropNoise(0.0, 0.0))
        assert patch.crop_center == (10.0, 3.0)

    def test_full_noise_ahead(self):
        box = OrientedBox3D(10.0, 3.0, -1.0, 4.0, 1.8, 1.5, 0.2)
        patch = crop_patch(np.array([[10.0, 3.0, 0.0, 0.0]]), box, CropNoise(3.0, 0.0))
        assert patch.crop_center[0] == pytest.approx(13.0)
        assert patch.crop_center[1] == pytest.approx(3.0)

    def test_membership_oracle(self, rng):
        """Oracle: per-point predicate against the 9.6 m square."""
        points = rng.uniform(0, 25, (3000, 4))
        box = OrientedBox3D(12.0, 12.0, -1.0, 4.0, 1.8, 1.5, 0.0)
        noise = CropNoise(2.0, 1.0)
        patch = crop_patch(points, box, noise)
        cx, cy = patch.crop_center
        inside = {
            i
            for i, p in enumerate(points)
            if abs(p[0] - cx) <= 4.8 and abs(p[1] - cy) <= 4.8
        }
        got = {tuple(p) for p in patch.points}
        assert got == {tuple(points[i]) for i in inside}

    def test_idempotent(self, rng):
        points = rng.uniform(0, 25, (3000, 4))
        box = OrientedBox3D(12.0, 12.0, -1.0, 4.0, 1.8, 1.5, 0.0)
        noise = CropNoise(1.5, -2.0)
        once = crop_patch(points, box, noise)
        twice = crop_patch(once.points, box, noise)
        np.testing.assert_array_equal(once.points, twice.points)

    def test_footprint_fully_outside_rejected(self):
        box = OrientedBox3D(0.0, 0.0, -1.0, 1.0, 1.0, 1.5, 0.0)
        with pytest.raises(ContractError):
            crop_patch(np.zeros((1, 4)), box, CropNoise(3.0, 0.0), patch_size=1.0)

    def test_noise_bounds_enforced(self):
        with pytest.raises(ContractError):
            CropNoise(3.5, 0.0)
        with pytest.raises(ContractError):
            CropNoise(1.0, 4.0)

    def test_noise_sampling_within_bounds(self, rng):
        for _ in range(200):
            noise = sample_crop_noise(rng)
            assert 0.0 <= noise.radius <= 3.0
            assert -math.pi <= noise.angle <= math.pi


class TestInferenceExtraction:
    def test_pure_crop_and_rotation(self, rng):
        points = rng.uniform(-10, 30, (4000, 4))
        proposal = Proposal(frame_id="000000", cx=12.0, cy=5.0, score=0.9)
        patch = extract_inference_patch(points, proposal)
        azimuth = math.atan2(5.0, 12.0)
        assert patch.rotation == pytest.approx(-azimuth)
        assert patch.crop_center[1] == 0.0
        assert patch.crop_center[0] == pytest.approx(math.hypot(12.0, 5.0))
        # Inverse rotation restores the original crop exactly.
        restored = rotate_about_z(patch.points, -patch.rotation)
        mask = (np.abs(points[:, 0] - 12.0) <= 4.8) & (np.abs(points[:, 1] - 5.0) <= 4.8)
        np.testing.assert_allclose(restored, points[mask], atol=1e-9)

    def test_rotated_center_azimuth_zero(self, rng):
        points = rng.uniform(-10, 30, (1000, 4))
        proposal = Proposal(frame_id="0", cx=9.0, cy=-7.0, score=0.5)
        patch = extract_inference_patch(points, proposal)
        center = rotate_about_z(np.array([[9.0, -7.0, 0.0]]), patch.rotation)[0]
        assert abs(math.atan2(center[1], center[0])) < 1e-9

    def test_other_proposal_points_removed(self, rng):
        points = rng.uniform(8, 16, (3000, 4))
        other_box = OrientedBox3D(12.0, 12.0, np.mean(points[:, 2]), 2.0, 2.0, 20.0, 0.3)
        target = Proposal(frame_id="0", cx=10.0, cy=10.0, score=0.9)
        other = Proposal(frame_id="0", cx=12.0, cy=12.0, score=0.8, box=other_box)
        patch = extract_inference_patch(points, target, other_proposals=[target, other])
        aligned_other = rotate_about_z(other_box, patch.rotation)
        assert len(points_in_box(patch.points, aligned_other, 0.2)) == 0

    def test_score_gate_keeps_weak_proposals(self, rng):
        points = rng.uniform(8, 16, (2000, 4))
        other_box = OrientedBox3D(12.0, 12.0, np.mean(points[:, 2]), 2.0, 2.0, 20.0, 0.3)
        target = Proposal(frame_id="0", cx=10.0, cy=10.0, score=0.9)
        other = Proposal(frame_id="0", cx=12.0, cy=12.0, score=0.1, box=other_box)
        gated = extract_inference_patch(points, target, [target, other], removal_score_threshold=0.5)
        aligned_other = rotate_about_z(other_box, gated.rotation)
        assert len(points_in_box(gated.points, aligned_other, 0.0)) > 0


class TestPatchDatabase:
    def _patch(self, rng, with_box=True):
        return Patch(
            points=rng.uniform(-5, 5, (40, 4)),
            box=OrientedBox3D(1.0, 2.0, -1.0, 4.0, 1.8, 1.5, 0.3) if with_box else None,
            crop_center=(1.5, 2.5),
            noise=CropNoise(1.0, 0.5),
            augmentation=AugmentationLog(
                seed=99, global_mirror=True, global_scale=1.01,
                object_mirror=False, object_scale=0.99, global_rotation=0.4,
            ),
            rotation=-0.2,
            frame_id="000123",
            object_index=7,
        )

    def test_record_roundtrip(self, rng):
        patch = self._patch(rng)
        back = deserialize_patch_record(serialize_patch_record(patch))
        np.testing.assert_array_equal(back.points, patch.points)
        np.testing.assert_array_equal(back.box.as_array(), patch.box.as_array())
        assert back.crop_center == patch.crop_center
        assert (back.noise.radius, back.noise.angle) == (1.0, 0.5)
        assert back.augmentation == patch.augmentation
        assert back.rotation == patch.rotation
        assert back.frame_id == "000123"
        assert back.object_index == 7

    def test_boxless_record(self, rng):
        back = deserialize_patch_record(serialize_patch_record(self._patch(rng, with_box=False)))
        assert back.box is None

    def test_database_write_read(self, tmp_path, rng):
        patches = [self._patch(rng) for _ in range(5)]
        meta = [{"frame_id": p.frame_id, "object_index": i, "difficulty": "easy"} for i, p in enumerate(patches)]
        write_patch_database(tmp_path / "db", patches, meta, seed=11)
        db = PatchDatabase(tmp_path / "db")
        assert len(db) == 5
        assert db.index["seed"] == 11
        loaded = db.load(3)
        np.testing.assert_array_equal(loaded.points, patches[3].points)
        with pytest.raises(ContractError):
            db.load(5)

    def test_hash_mismatch_detected(self, tmp_path, rng):
        patches = [self._patch(rng)]
        write_patch_database(tmp_path / "db", patches, [{"frame_id": "0", "object_index": 0, "difficulty": "easy"}], seed=0)
        data = tmp_path / "db" / "patches.bin"
        blob = bytearray(data.read_bytes())
        blob[-1] ^= 0xFF
        data.write_bytes(bytes(blob))
        with pytest.raises(DataError):
            PatchDatabase(tmp_path / "db")

    def test_bad_record_rejected(self):
        with pytest.raises(FormatError):
            deserialize_patch_record(b"garbage")


class TestFullChain:
    def test_build_training_patch_contract(self, dataset):
        frames = [load_labeled_frame(dataset, f"{i:06d}") for i in range(4)]
        objects, surfaces = build_object_surface_lists(frames)
        config = RunConfig()
        for i, obj in enumerate(objects):
            patch = build_training_patch(obj, surfaces, seed=1000 + i, config=config)
            cx, cy = patch.crop_center
            assert np.all(np.abs(patch.points[:, 0] - cx) <= 4.8)
            assert np.all(np.abs(patch.points[:, 1] - cy) <= 4.8)
            assert math.hypot(patch.box.cx - cx, patch.box.cy - cy) <= 3.0 + 1e-12
            assert patch.augmentation.object_rotation == 0.0
            assert patch.augmentation.vertical_shift == 0.0

    def test_same_seed_same_patch(self, dataset):
        frames = [load_labeled_frame(dataset, "000000")]
        objects, surfaces = build_object_surface_lists(frames)
        a = build_training_patch(objects[0], surfaces, seed=5)
        b = build_training_patch(objects[0], surfaces, seed=5)
        assert serialize_patch_record(a) == serialize_patch_record(b)
