"""Synthetic KITTI-layout scenes for demos and desk-scale verification.

Generated frames contain a noisy ground plane and box-shaped car point
clusters, written in the exact on-disk formats of the real dataset
(velodyne .bin, label .txt, calib .txt, split .txt), so the whole pipeline
can run end-to-end without the benchmark download.
"""

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .boxes import OrientedBox3D
from .kitti import (
    CalibrationSet,
    classify_difficulty,
    parse_label_file,
    project_box_to_image,
    sensor_box_to_camera_frame,
    write_point_cloud,
)

GROUND_Z = -1.73

# Occlusion / truncation presets that land in the intended difficulty bucket
# provided the projected 2D box is tall enough.
_DIFFICULTY_PRESETS = {
    "easy": (0, 0.0),
    "moderate": (1, 0.20),
    "hard": (2, 0.40),
}


def make_calibration():
    """KITTI-like calibration: sensor x->cam z, sensor -y->cam x, sensor -z->cam y.

    The rectification rotation is exactly identity: the sensor-frame box
    yaw convention can only represent yaw (not roll/pitch), so identity
    keeps camera-frame and sensor-frame containment bit-consistent.  Real
    rectification matrices deviate from identity by well under a degree.
    """
    velo_to_cam = np.array(
        [
            [0.0, -1.0, 0.0, 0.0],
            [0.0, 0.0, -1.0, -0.08],
            [1.0, 0.0, 0.0, -0.27],
        ]
    )
    projection = np.array(
        [
            [721.5, 0.0, 609.6, 44.9],
            [0.0, 721.5, 172.9, 0.2],
            [0.0, 0.0, 1.0, 0.003],
        ]
    )
    return CalibrationSet(rect_rotation=np.eye(3), velo_to_cam=velo_to_cam, cam_projection=projection)


def sample_box_surface_points(box, count, rng):
    """Points on the five visible faces of a box (everything but the bottom)."""
    faces = rng.integers(0, 5, size=count)
    u = rng.uniform(-0.5, 0.5, size=count)
    v = rng.uniform(-0.5, 0.5, size=count)
    local = np.empty((count, 3))
    for face in range(5):
        mask = faces == face
        if face == 0:  # top
            local[mask] = np.column_stack([u[mask] * box.l, v[mask] * box.w, np.full(mask.sum(), 0.5 * box.h)])
        elif face == 1:  # front
            local[mask] = np.column_stack([np.full(mask.sum(), 0.5 * box.l), u[mask] * box.w, v[mask] * box.h])
        elif face == 2:  # back
            local[mask] = np.column_stack([np.full(mask.sum(), -0.5 * box.l), u[mask] * box.w, v[mask] * box.h])
        elif face == 3:  # left
            local[mask] = np.column_stack([u[mask] * box.l, np.full(mask.sum(), 0.5 * box.w), v[mask] * box.h])
        else:  # right
            local[mask] = np.column_stack([u[mask] * box.l, np.full(mask.sum(), -0.5 * box.w), v[mask] * box.h])
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    world = local @ rot.T + [box.cx, box.cy, box.cz]
    reflect = rng.uniform(0.0, 1.0, size=(count, 1))
    return np.hstack([world, reflect])


@dataclass
class SceneObject:
    box: OrientedBox3D
    class_name: str
    occlusion: int
    truncation: float


def make_scene(rng, num_cars=3, ground_points=12000):
    """Random scene: ground plane plus separated cars at 8-26 m."""
    ground_xy = np.column_stack(
        [rng.uniform(0.0, 50.0, ground_points), rng.uniform(-20.0, 20.0, ground_points)]
    )
    ground = np.column_stack(
        [
            ground_xy,
            GROUND_Z + rng.normal(0.0, 0.01, ground_points),
            rng.uniform(0.0, 1.0, ground_points),
        ]
    )
    clusters = [ground]
    objects = []
    difficulty_cycle = ("easy", "moderate", "hard")
    lanes = rng.permutation(np.linspace(-7.0, 7.0, max(num_cars, 2)))
    for i in range(num_cars):
        name = difficulty_cycle[i % 3]
        occlusion, truncation = _DIFFICULTY_PRESETS[name]
        length = float(rng.uniform(3.6, 4.4))
        width = float(rng.uniform(1.5, 1.8))
        height = float(rng.uniform(1.4, 1.7))
        box = OrientedBox3D(
            cx=float(rng.uniform(8.0, 26.0)),
            cy=float(lanes[i]),
            cz=GROUND_Z + 0.5 * height,
            l=length,
            w=width,
            h=height,
            yaw=float(rng.uniform(-math.pi, math.pi)),
        )
        count = int(600 - 15 * box.bev_distance)
        clusters.append(sample_box_surface_points(box, count, rng))
        objects.append(SceneObject(box=box, class_name="Car", occlusion=occlusion, truncation=truncation))
    return np.vstack(clusters), objects


def format_label_line(obj, calib):
    location, rotation_y, dims = sensor_box_to_camera_frame(obj.box, calib)
    bbox = project_box_to_image(obj.box, calib) or (0.0, 0.0, 50.0, 50.0)
    alpha = rotation_y - math.atan2(location[0], location[2])
    fields = [
        obj.class_name,
        f"{obj.truncation:.2f}",
        str(obj.occlusion),
        f"{alpha:.6f}",
        *(f"{v:.2f}" for v in bbox),
        *(f"{v:.6f}" for v in dims),
        *(f"{v:.6f}" for v in location),
        f"{rotation_y:.6f}",
    ]
    return " ".join(fields)


def write_dataset(root, num_frames=20, cars_per_frame=3, seed=0):
    """Create a synthetic KITTI-layout dataset; returns the frame id list."""
    root = Path(root)
    for sub in ("velodyne", "label_2", "calib"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    calib = make_calibration()
    calib_text = "\n".join(
        [
            "P0: " + " ".join("0.0" for _ in range(12)),
            "P1: " + " ".join("0.0" for _ in range(12)),
            "P2: " + " ".join(f"{v:.12e}" for v in calib.cam_projection.ravel()),
            "P3: " + " ".join("0.0" for _ in range(12)),
            "R0_rect: " + " ".join(f"{v:.12e}" for v in calib.rect_rotation.ravel()),
            "Tr_velo_to_cam: " + " ".join(f"{v:.12e}" for v in calib.velo_to_cam.ravel()),
            "Tr_imu_to_velo: " + " ".join("0.0" for _ in range(12)),
        ]
    )
    rng = np.random.default_rng(seed)
    frame_ids = []
    for i in range(num_frames):
        frame_id = f"{i:06d}"
        frame_ids.append(frame_id)
        points, objects = make_scene(rng, num_cars=cars_per_frame)
        write_point_cloud(root / "velodyne" / f"{frame_id}.bin", points)
        lines = [format_label_line(obj, calib) for obj in objects]
        (root / "label_2" / f"{frame_id}.txt").write_text("\n".join(lines) + "\n")
        (root / "calib" / f"{frame_id}.txt").write_text(calib_text + "\n")
    (root / "split.txt").write_text("\n".join(frame_ids) + "\n")
    return frame_ids


def dataset_difficulties(root, frame_id):
    """Classified difficulty per labeled object of a generated frame."""
    labels = parse_label_file(Path(root) / "label_2" / f"{frame_id}.txt")
    return [classify_difficulty(label) for label in labels]
