"""Reading KITTI-format data: scans, labels, calibration, difficulty.

The demo generates a small synthetic dataset in the exact on-disk formats
(so it runs without the benchmark download), then walks through ingestion.
"""

import tempfile
from pathlib import Path

from patchkit.kitti import KittiDataset, camera_box_to_sensor_frame, classify_difficulty, load_split
from patchkit.synthetic import write_dataset

root = Path(tempfile.mkdtemp()) / "kitti"
write_dataset(root, num_frames=4, cars_per_frame=3, seed=7)
print(f"synthetic dataset at {root}")

# Split files are plain lists of zero-padded frame ids.
frame_ids = load_split(root / "split.txt")
print(f"split: {len(frame_ids)} frames -> {frame_ids}")

dataset = KittiDataset(root)
cloud = dataset.load_cloud("000000")
print(f"\nframe 000000: {len(cloud)} points, first = {cloud.points[0]}")

# Labels live in the camera frame; boxes for the pipeline live in the
# sensor frame (x forward, y left, z up, yaw CCW from +x).
calib = dataset.load_calibration("000000")
for label in dataset.load_labels("000000"):
    box = camera_box_to_sensor_frame(label, calib)
    difficulty = classify_difficulty(label)
    print(
        f"  {label.class_name:<4} {difficulty.value:<9} "
        f"camera loc {tuple(round(v, 2) for v in label.location_cam)} -> "
        f"sensor center ({box.cx:.2f}, {box.cy:.2f}, {box.cz:.2f}), yaw {box.yaw:+.2f}"
    )
