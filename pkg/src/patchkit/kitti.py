"""KITTI dataset ingestion: velodyne scans, labels, calibration, splits.

File formats handled here:
  * velodyne ``.bin``: little-endian float32 quadruples (x, y, z, reflectance)
  * label ``.txt``: 15 whitespace fields per object, optional 16th score
  * calib ``.txt``: named matrix lines (``R0_rect:``, ``Tr_velo_to_cam:``, ``P2:``)
  * split ``.txt``: one zero-padded 6-digit frame id per line

Labels live in the rectified camera frame (x right, y down, z forward,
location at the bottom-face center); boxes used by the rest of the package
live in the sensor frame (x forward, y left, z up, centroid location).
The yaw convention after conversion is: 0 means the box length points along
sensor +x, counter-clockwise positive from above, wrapped to (-pi, pi].
"""

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boxes import OrientedBox3D, wrap_angle
from .errors import DataError, FormatError, NumericError

POINT_RECORD_BYTES = 16  # four little-endian float32 per point


@dataclass
class PointCloud:
    """Flat (N, 4) array of x, y, z, reflectance in the sensor frame."""

    points: np.ndarray
    frame_id: str = ""

    def __len__(self):
        return len(self.points)

    @property
    def xyz(self):
        return self.points[:, :3]


class Difficulty(enum.Enum):
    EASY = "easy"
    MODERATE = "moderate"
    HARD = "hard"
    IGNORED = "ignored"

    @property
    def rank(self):
        """Strictness rank: easy is strictest (0), hard loosest (2)."""
        return {"easy": 0, "moderate": 1, "hard": 2, "ignored": 3}[self.value]


@dataclass
class LabelRecord:
    class_name: str
    truncation: float
    occlusion: int
    alpha: float
    bbox2d: tuple  # (left, top, right, bottom) pixels
    dims: tuple  # (h, w, l) meters
    location_cam: tuple  # (x, y, z) meters, camera frame, bottom-face center
    rotation_y: float
    score: float | None = None

    @property
    def bbox_height(self):
        return self.bbox2d[3] - self.bbox2d[1]


@dataclass
class CalibrationSet:
    rect_rotation: np.ndarray  # (3, 3)
    velo_to_cam: np.ndarray  # (3, 4)
    cam_projection: np.ndarray  # (3, 4), P2

    def __post_init__(self):
        self.rect_rotation = np.asarray(self.rect_rotation, dtype=np.float64).reshape(3, 3)
        self.velo_to_cam = np.asarray(self.velo_to_cam, dtype=np.float64).reshape(3, 4)
        self.cam_projection = np.asarray(self.cam_projection, dtype=np.float64).reshape(3, 4)
        residual = self.rect_rotation @ self.rect_rotation.T - np.eye(3)
        if np.max(np.abs(residual)) > 1e-4:
            raise DataError("rectification rotation is not orthonormal")

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.hstack([np.eye(3), np.zeros((3, 1))]), np.hstack([np.eye(3), np.zeros((3, 1))]))

    def sensor_to_camera_matrix(self):
        """4x4 homogeneous transform from the sensor frame to the rectified camera frame."""
        tr = np.eye(4)
        tr[:3, :4] = self.velo_to_cam
        rect = np.eye(4)
        rect[:3, :3] = self.rect_rotation
        return rect @ tr

    def camera_to_sensor_matrix(self):
        try:
            matrix = np.linalg.inv(self.sensor_to_camera_matrix())
        except np.linalg.LinAlgError as exc:
            raise NumericError("calibration transform is singular") from exc
        if not np.all(np.isfinite(matrix)):
            raise NumericError("calibration transform is singular")
        return matrix


def read_point_cloud(path):
    """Read a velodyne ``.bin`` scan, preserving point order."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) % POINT_RECORD_BYTES != 0:
        raise FormatError(
            f"{path}: length {len(raw)} is not a multiple of {POINT_RECORD_BYTES} bytes"
        )
    points = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    bad = np.nonzero(~np.all(np.isfinite(points), axis=1))[0]
    if bad.size:
        raise DataError(f"{path}: non-finite value at point index {int(bad[0])}")
    return PointCloud(points=points, frame_id=path.stem)


def write_point_cloud(path, cloud):
    """Write a point cloud in velodyne layout (float32, little-endian)."""
    pts = np.asarray(cloud.points if isinstance(cloud, PointCloud) else cloud)
    Path(path).write_bytes(pts.astype("<f4").tobytes())


def _parse_float(token, path, line_no):
    try:
        return float(token)
    except ValueError as exc:
        raise DataError(f"{path}: line {line_no}: cannot parse number {token!r}") from exc


def parse_label_file(path):
    """Parse a KITTI label or prediction file into LabelRecords.

    Prediction files carry a 16th score field, which is kept; ``DontCare``
    records are retained so callers can decide how to treat them.
    """
    path = Path(path)
    records = []
    for line_no, line in enumerate(path.read_text().splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) not in (15, 16):
            raise FormatError(
                f"{path}: line {line_no}: expected 15 or 16 fields, got {len(fields)}"
            )
        values = [_parse_float(tok, path, line_no) for tok in fields[1:]]
        record = LabelRecord(
            class_name=fields[0],
            truncation=values[0],
            occlusion=int(values[1]),
            alpha=values[2],
            bbox2d=tuple(values[3:7]),
            dims=tuple(values[7:10]),
            location_cam=tuple(values[10:13]),
            rotation_y=values[13],
            score=values[14] if len(values) == 15 else None,
        )
        if record.class_name != "DontCare":
            if min(record.dims) <= 0:
                raise DataError(
                    f"{path}: line {line_no}: non-positive box dimensions {record.dims}"
                )
            left, top, right, bottom = record.bbox2d
            if not (right > left and bottom > top):
                raise DataError(f"{path}: line {line_no}: degenerate 2D box {record.bbox2d}")
        records.append(record)
    return records


def read_calibration(path):
    """Parse the named matrices of a KITTI calib file."""
    path = Path(path)
    matrices = {}
    for line in path.read_text().splitlines():
        if ":" not in line:
            continue
        key, _, rest = line.partition(":")
        values = rest.split()
        if values:
            matrices[key.strip()] = np.array([float(v) for v in values])
    needed = {"R0_rect": 9, "Tr_velo_to_cam": 12, "P2": 12}
    for key, count in needed.items():
        if key not in matrices:
            raise FormatError(f"{path}: missing calibration entry {key!r}")
        if matrices[key].size != count:
            raise FormatError(f"{path}: entry {key!r} has {matrices[key].size} values, expected {count}")
    return CalibrationSet(
        rect_rotation=matrices["R0_rect"].reshape(3, 3),
        velo_to_cam=matrices["Tr_velo_to_cam"].reshape(3, 4),
        cam_projection=matrices["P2"].reshape(3, 4),
    )


def camera_box_to_sensor_frame(label, calib):
    """Convert a camera-frame label into a sensor-frame centroid box."""
    h, w, l = label.dims
    cam_to_sensor = calib.camera_to_sensor_matrix()
    bottom = cam_to_sensor @ np.array([*label.location_cam, 1.0])
    return OrientedBox3D(
        cx=float(bottom[0]),
        cy=float(bottom[1]),
        cz=float(bottom[2]) + 0.5 * h,
        l=l,
        w=w,
        h=h,
        yaw=wrap_angle(-label.rotation_y - math.pi / 2.0),
    )


def sensor_box_to_camera_frame(box, calib):
    """Inverse of camera_box_to_sensor_frame.

    Returns (location_cam, rotation_y, dims) with dims ordered (h, w, l)
    and location at the bottom-face center, ready for a label line.
    """
    sensor_to_cam = calib.sensor_to_camera_matrix()
    bottom = sensor_to_cam @ np.array([box.cx, box.cy, box.bottom_z, 1.0])
    rotation_y = wrap_angle(-box.yaw - math.pi / 2.0)
    return tuple(float(v) for v in bottom[:3]), rotation_y, (box.h, box.w, box.l)


def project_box_to_image(box, calib):
    """Project the eight box corners through P2; returns a 2D bbox or None.

    None is returned when any corner lies behind the camera, in which case
    callers should fall back to a placeholder bbox.
    """
    corners = []
    for sx in (0.5, -0.5):
        for sy in (0.5, -0.5):
            for sz in (0.5, -0.5):
                corners.append([sx * box.l, sy * box.w, sz * box.h])
    corners = np.asarray(corners)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    world = corners @ rot.T + [box.cx, box.cy, box.cz]
    cam = (calib.sensor_to_camera_matrix() @ np.hstack([world, np.ones((8, 1))]).T)[:3]
    if np.any(cam[2] <= 0.1):
        return None
    image = calib.cam_projection @ np.vstack([cam, np.ones(8)])
    u = image[0] / image[2]
    v = image[1] / image[2]
    return float(u.min()), float(v.min()), float(u.max()), float(v.max())


# 2D-box height floors, max occlusion, and max truncation per difficulty,
# matching the KITTI devkit thresholds.
_DIFFICULTY_TABLE = (
    (Difficulty.EASY, 40.0, 0, 0.15),
    (Difficulty.MODERATE, 25.0, 1, 0.30),
    (Difficulty.HARD, 25.0, 2, 0.50),
)


def classify_difficulty(label):
    """KITTI difficulty from 2D box height, occlusion, and truncation."""
    height = label.bbox_height
    for level, min_height, max_occlusion, max_truncation in _DIFFICULTY_TABLE:
        if level is Difficulty.EASY:
            occluded_ok = label.occlusion == 0
        else:
            occluded_ok = label.occlusion <= max_occlusion
        if height >= min_height and occluded_ok and label.truncation <= max_truncation:
            return level
    return Difficulty.IGNORED


def load_split(path):
    """Read an ordered, duplicate-free list of frame ids."""
    path = Path(path)
    ids = []
    seen = set()
    for line_no, line in enumerate(path.read_text().splitlines(), start=1):
        frame_id = line.strip()
        if not frame_id:
            continue
        if not (len(frame_id) == 6 and frame_id.isdigit()):
            raise FormatError(f"{path}: line {line_no}: bad frame id {frame_id!r}")
        if frame_id in seen:
            raise DataError(f"{path}: line {line_no}: duplicate frame id {frame_id}")
        seen.add(frame_id)
        ids.append(frame_id)
    return ids


def format_prediction_line(box, score, calib, class_name="Car"):
    """Format a detection as a 16-field KITTI prediction line."""
    location, rotation_y, dims = sensor_box_to_camera_frame(box, calib)
    bbox = project_box_to_image(box, calib)
    if bbox is None:
        bbox = (0.0, 0.0, 50.0, 50.0)
    alpha = wrap_angle(rotation_y - math.atan2(location[0], location[2]))
    fields = [
        class_name,
        "0.00",
        "0",
        f"{alpha:.6f}",
        *(f"{v:.2f}" for v in bbox),
        *(f"{v:.6f}" for v in dims),
        *(f"{v:.6f}" for v in location),
        f"{rotation_y:.6f}",
        f"{score:.6f}",
    ]
    return " ".join(fields)


def write_predictions(path, detections, calib, class_name="Car"):
    """Write DetectionRecords for one frame in KITTI prediction format."""
    lines = [format_prediction_line(d.box, d.score, calib, class_name) for d in detections]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


@dataclass
class KittiDataset:
    """Path helper for the standard KITTI object-detection layout."""

    root: Path
    velodyne_dir: str = "velodyne"
    label_dir: str = "label_2"
    calib_dir: str = "calib"

    def __post_init__(self):
        self.root = Path(self.root)

    def velodyne_path(self, frame_id):
        return self.root / self.velodyne_dir / f"{frame_id}.bin"

    def label_path(self, frame_id):
        return self.root / self.label_dir / f"{frame_id}.txt"

    def calib_path(self, frame_id):
        return self.root / self.calib_dir / f"{frame_id}.txt"

    def has_frame(self, frame_id):
        return self.velodyne_path(frame_id).is_file()

    def load_cloud(self, frame_id):
        return read_point_cloud(self.velodyne_path(frame_id))

    def load_labels(self, frame_id):
        return parse_label_file(self.label_path(frame_id))

    def load_calibration(self, frame_id):
        return read_calibration(self.calib_path(frame_id))
