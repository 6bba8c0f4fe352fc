"""Training-patch construction and inference-time patch extraction.

The training pipeline re-hosts each object on a ground surface taken from a
scene at a similar sensor distance, augments the result, and crops a fixed
square around the object with positional noise so the detection head has to
recover the true center:

    build_object_surface_lists -> pair_object_with_surface ->
    place_object_on_surface -> augment -> crop_patch

All randomized steps take explicit seeds and are bitwise reproducible.
Patches keep absolute sensor-frame coordinates throughout; surfaces (and
inference patches) are rotated about the vertical axis so their center sits
on the +x "depth" axis.

Patch databases on disk consist of ``patches.bin`` (concatenated records in
the fixed little-endian layout below) plus ``index.json`` mapping records to
byte ranges and source frames.

    record layout (all little-endian, 8-byte aligned sections):
    0    4s   magic b"PKPR"
    4    u16  record version (1)
    6    u16  flags (bit 0: record carries a ground-truth box)
    8    u32  point count N
    12   u32  source object index within its frame
    16   8s   source frame id (6 ASCII digits, zero padded)
    24   u64  augmentation seed
    32   f64  box cx, cy, cz, l, w, h, yaw        (7 values)
    88   f64  crop center x, y                    (2 values)
    104  f64  crop noise radius, angle            (2 values)
    120  f64  global mirror flag, global scale,
              object mirror flag, object scale,
              global rotation, object rotation (always 0),
              vertical shift (always 0)           (7 values)
    176  f64  depth-axis alignment rotation       (1 value)
    184  f64  points, N x (x, y, z, reflectance)
"""

import hashlib
import json
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .boxes import OrientedBox3D, bev_corners, clip_polygon, points_in_box, polygon_area, rotate_about_z
from .config import RunConfig, derive_seed
from .errors import ContractError, DataError, FormatError
from .kitti import Difficulty, camera_box_to_sensor_frame, classify_difficulty

PATCH_SIZE = 9.6
ENLARGE_MARGIN = 0.2
NOISE_RADIUS_MAX = 3.0
SURFACE_WINDOW = 64
DIFFICULTY_PROBS = {"easy": 1.0, "moderate": 0.8, "hard": 0.6}


@dataclass
class LabeledFrame:
    """Sensor-frame view of one annotated scene."""

    frame_id: str
    points: np.ndarray  # (N, 4)
    boxes: list  # OrientedBox3D per labeled object
    classes: list  # class name per object
    difficulties: list  # Difficulty per object


def load_labeled_frame(dataset, frame_id):
    """Assemble a LabeledFrame from a KITTI-layout dataset.

    DontCare records have no usable 3D box and are dropped here.
    """
    cloud = dataset.load_cloud(frame_id)
    calib = dataset.load_calibration(frame_id)
    boxes = []
    classes = []
    difficulties = []
    for label in dataset.load_labels(frame_id):
        if label.class_name == "DontCare":
            continue
        boxes.append(camera_box_to_sensor_frame(label, calib))
        classes.append(label.class_name)
        difficulties.append(classify_difficulty(label))
    return LabeledFrame(
        frame_id=frame_id,
        points=cloud.points,
        boxes=boxes,
        classes=classes,
        difficulties=difficulties,
    )


@dataclass
class SurfaceEntry:
    """Ground region around an object, cleaned and depth-axis aligned."""

    points: np.ndarray  # (M, 4), all object interiors removed
    center_xy: tuple  # original object center after alignment: (distance, 0)
    vertical_reference: float  # bottom-face z of the original object
    distance: float
    frame_id: str
    object_index: int


@dataclass
class ObjectEntry:
    points: np.ndarray  # (N, 4) object points (margin-enlarged membership)
    box: OrientedBox3D
    frame_id: str
    object_index: int
    distance: float
    difficulty: Difficulty
    own_surface: SurfaceEntry


@dataclass
class CropNoise:
    """Polar offset of the crop center from the object center."""

    radius: float
    angle: float

    def __post_init__(self):
        if not 0.0 <= self.radius <= NOISE_RADIUS_MAX:
            raise ContractError(f"noise radius out of [0, {NOISE_RADIUS_MAX}]: {self.radius}")
        if not -math.pi <= self.angle <= math.pi:
            raise ContractError(f"noise angle out of [-pi, pi]: {self.angle}")

    @property
    def offset(self):
        return self.radius * math.cos(self.angle), self.radius * math.sin(self.angle)


@dataclass
class AugmentationLog:
    seed: int
    global_mirror: bool = False
    global_scale: float = 1.0
    object_mirror: bool = False
    object_scale: float = 1.0
    global_rotation: float = 0.0
    # Deliberately never applied; kept so audits can assert they stay zero.
    object_rotation: float = 0.0
    vertical_shift: float = 0.0


@dataclass
class Patch:
    points: np.ndarray  # (N, 4)
    box: OrientedBox3D | None
    crop_center: tuple  # (x, y)
    noise: CropNoise | None = None
    augmentation: AugmentationLog | None = None
    rotation: float = 0.0  # depth-axis alignment angle applied (inference)
    frame_id: str = ""
    object_index: int = 0


def sample_crop_noise(rng, max_radius=NOISE_RADIUS_MAX):
    """Independent uniform draws over radius [0, max] and angle [-pi, pi]."""
    return CropNoise(
        radius=float(rng.uniform(0.0, max_radius)),
        angle=float(rng.uniform(-math.pi, math.pi)),
    )


def _bev_crop_mask(points, cx, cy, half):
    return (np.abs(points[:, 0] - cx) <= half) & (np.abs(points[:, 1] - cy) <= half)


def build_object_surface_lists(
    frames,
    margin=ENLARGE_MARGIN,
    patch_size=PATCH_SIZE,
    class_name="Car",
):
    """Distance-sorted object and surface lists over a set of frames.

    One entry pair per ``class_name`` object of non-ignored difficulty.
    Surfaces are the patch-sized square around the object with the
    margin-enlarged interiors of *all* labeled objects removed, then
    rotated so the object center sits on the depth axis.
    """
    half = 0.5 * patch_size
    objects = []
    surfaces = []
    for frame in frames:
        pts = np.asarray(frame.points, dtype=np.float64)
        removed = np.zeros(len(pts), dtype=bool)
        for box in frame.boxes:
            removed[points_in_box(pts, box, margin)] = True
        for index, box in enumerate(frame.boxes):
            if frame.classes[index] != class_name:
                continue
            if frame.difficulties[index] is Difficulty.IGNORED:
                continue
            distance = box.bev_distance
            object_points = pts[points_in_box(pts, box, margin)]
            surface_mask = _bev_crop_mask(pts, box.cx, box.cy, half) & ~removed
            azimuth = math.atan2(box.cy, box.cx)
            surface = SurfaceEntry(
                points=rotate_about_z(pts[surface_mask], -azimuth),
                center_xy=(distance, 0.0),
                vertical_reference=box.bottom_z,
                distance=distance,
                frame_id=frame.frame_id,
                object_index=index,
            )
            surfaces.append(surface)
            objects.append(
                ObjectEntry(
                    points=object_points,
                    box=box,
                    frame_id=frame.frame_id,
                    object_index=index,
                    distance=distance,
                    difficulty=frame.difficulties[index],
                    own_surface=surface,
                )
            )
    objects.sort(key=lambda o: o.distance)
    surfaces.sort(key=lambda s: s.distance)
    return objects, surfaces


def pair_object_with_surface(
    obj,
    surfaces,
    difficulty_probs=None,
    seed=0,
    window=SURFACE_WINDOW,
):
    """Pick a surface at a similar sensor distance, or keep the object's own.

    With the difficulty-dependent probability a replacement surface is drawn
    uniformly from the ``window`` nearest-by-distance surfaces; otherwise
    the object's original surface is returned.
    """
    if not surfaces:
        raise ContractError("surface list is empty")
    probs = difficulty_probs or DIFFICULTY_PROBS
    rng = np.random.default_rng(seed)
    if rng.random() >= probs[obj.difficulty.value]:
        return obj.own_surface
    gaps = np.array([abs(s.distance - obj.distance) for s in surfaces])
    nearest = np.argsort(gaps, kind="stable")[: min(window, len(surfaces))]
    return surfaces[int(nearest[int(rng.integers(len(nearest)))])]


def place_object_on_surface(obj, surface):
    """Re-host an object's points on a surface at matching height.

    The object is rotated onto the depth axis, moved to the surface's
    stored object location, and shifted vertically so its bottom face sits
    exactly at the surface's vertical reference.  Returns (points, box)
    with the surface points first.
    """
    azimuth = math.atan2(obj.box.cy, obj.box.cx)
    box = rotate_about_z(obj.box, -azimuth)
    points = rotate_about_z(obj.points, -azimuth)
    dx = surface.center_xy[0] - box.cx
    dy = surface.center_xy[1] - box.cy
    dz = surface.vertical_reference - box.bottom_z
    points[:, 0] += dx
    points[:, 1] += dy
    points[:, 2] += dz
    box = replace(box, cx=surface.center_xy[0], cy=surface.center_xy[1], cz=box.cz + dz)
    merged = np.vstack([surface.points, points])
    return merged, box


def _mirror_y(points, box):
    points = points.copy()
    points[:, 1] = -points[:, 1]
    return points, replace(box, cy=-box.cy, yaw=-box.yaw)


def augment(
    points,
    box,
    seed,
    object_indices=None,
    mirror_prob=0.5,
    scale_range=(0.95, 1.05),
    rotation_range=math.pi / 2.0,
    margin=ENLARGE_MARGIN,
):
    """Global and per-object patch augmentation.

    Applies, in order: a global mirror across the x-z plane (probability
    ``mirror_prob``), a global scale about the sensor origin, a per-object
    mirror across the box's own length axis and a per-object scale about
    the box center (object points only), and a global rotation about the
    sensor z-axis drawn from [-rotation_range, rotation_range].  No
    per-object rotation and no vertical translation are ever applied.

    ``object_indices`` selects the object's points; when omitted they are
    recovered by margin-enlarged box containment.  All five random draws
    happen up front in a fixed order, so the log fully determines the
    transform.  Returns (points, box, AugmentationLog).
    """
    rng = np.random.default_rng(seed)
    do_mirror = bool(rng.random() < mirror_prob)
    global_scale = float(rng.uniform(*scale_range))
    do_object_mirror = bool(rng.random() < mirror_prob)
    object_scale = float(rng.uniform(*scale_range))
    rotation = float(rng.uniform(-rotation_range, rotation_range))

    points = np.asarray(points, dtype=np.float64).copy()
    if do_mirror:
        points, box = _mirror_y(points, box)

    points[:, :3] *= global_scale
    box = replace(
        box,
        cx=box.cx * global_scale,
        cy=box.cy * global_scale,
        cz=box.cz * global_scale,
        l=box.l * global_scale,
        w=box.w * global_scale,
        h=box.h * global_scale,
    )

    if object_indices is None:
        object_indices = points_in_box(points, box, margin)
    obj = points[object_indices]

    if do_object_mirror:
        # Reflect object points across the vertical plane through the box's
        # length axis; the box itself maps onto itself.
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        dx = obj[:, 0] - box.cx
        dy = obj[:, 1] - box.cy
        local_x = dx * c + dy * s
        local_y = -(-dx * s + dy * c)
        obj[:, 0] = box.cx + local_x * c - local_y * s
        obj[:, 1] = box.cy + local_x * s + local_y * c

    center = np.array([box.cx, box.cy, box.cz])
    obj[:, :3] = center + (obj[:, :3] - center) * object_scale
    points[object_indices] = obj
    box = replace(box, l=box.l * object_scale, w=box.w * object_scale, h=box.h * object_scale)

    points = rotate_about_z(points, rotation)
    box = rotate_about_z(box, rotation)

    log = AugmentationLog(
        seed=int(seed),
        global_mirror=do_mirror,
        global_scale=global_scale,
        object_mirror=do_object_mirror,
        object_scale=object_scale,
        global_rotation=rotation,
    )
    return points, box, log


def crop_patch(points, box, noise, patch_size=PATCH_SIZE, augmentation=None, frame_id="", object_index=0):
    """Crop the training square at the noise-offset object center."""
    ox, oy = noise.offset
    cx = box.cx + ox
    cy = box.cy + oy
    half = 0.5 * patch_size
    square = np.array([[cx + half, cy + half], [cx - half, cy + half], [cx - half, cy - half], [cx + half, cy - half]])
    if polygon_area(clip_polygon(bev_corners(box), square)) <= 0.0:
        raise ContractError("object footprint lies fully outside the crop")
    points = np.asarray(points, dtype=np.float64)
    kept = points[_bev_crop_mask(points, cx, cy, half)]
    return Patch(
        points=kept,
        box=box,
        crop_center=(cx, cy),
        noise=noise,
        augmentation=augmentation,
        frame_id=frame_id,
        object_index=object_index,
    )


def build_training_patch(obj, surfaces, seed, config=None):
    """Full surface-sampling -> placement -> augmentation -> crop chain.

    ``seed`` is the per-patch seed; pairing, augmentation, and crop noise
    use independent child streams derived from it.
    """
    config = config or RunConfig()
    surface = pair_object_with_surface(
        obj,
        surfaces,
        difficulty_probs=config.difficulty_probs,
        seed=derive_seed(seed, "pair"),
        window=config.surface_window,
    )
    merged, box = place_object_on_surface(obj, surface)
    object_indices = np.arange(len(surface.points), len(merged))
    points, box, log = augment(
        merged,
        box,
        derive_seed(seed, "augment"),
        object_indices=object_indices,
        mirror_prob=config.mirror_prob,
        scale_range=(config.scale_min, config.scale_max),
        rotation_range=config.rotation_range,
        margin=config.enlarge_margin,
    )
    noise_rng = np.random.default_rng(derive_seed(seed, "noise"))
    noise = sample_crop_noise(noise_rng, config.crop_noise_radius)
    return crop_patch(
        points,
        box,
        noise,
        patch_size=config.patch_size,
        augmentation=log,
        frame_id=obj.frame_id,
        object_index=obj.object_index,
    )


def extract_inference_patch(
    cloud,
    proposal,
    other_proposals=(),
    patch_size=PATCH_SIZE,
    margin=ENLARGE_MARGIN,
    removal_score_threshold=None,
):
    """Crop a proposal-centered patch and align it with the depth axis.

    Points inside the margin-enlarged boxes of other proposals overlapping
    the patch are removed first (optionally only for proposals whose score
    reaches ``removal_score_threshold``).  The whole patch is then rotated
    about the sensor z-axis so the proposal center azimuth becomes zero;
    the applied angle is recorded in ``Patch.rotation`` and predictions map
    back to the scene frame by rotating with ``-rotation``.
    """
    pts = cloud.points if hasattr(cloud, "points") else np.asarray(cloud, dtype=np.float64)
    half = 0.5 * patch_size
    px, py = proposal.cx, proposal.cy
    kept = pts[_bev_crop_mask(pts, px, py, half)]

    for other in other_proposals:
        if other is proposal or other.box is None:
            continue
        if removal_score_threshold is not None and other.score < removal_score_threshold:
            continue
        reach = 0.5 * math.hypot(other.box.l, other.box.w) + margin
        if abs(other.cx - px) > half + reach or abs(other.cy - py) > half + reach:
            continue
        inside = points_in_box(kept, other.box, margin)
        if inside.size:
            kept = np.delete(kept, inside, axis=0)

    azimuth = math.atan2(py, px)
    return Patch(
        points=rotate_about_z(kept, -azimuth),
        box=None,
        crop_center=(math.hypot(px, py), 0.0),
        rotation=-azimuth,
        frame_id=getattr(proposal, "frame_id", ""),
    )


# ---------------------------------------------------------------------------
# Patch database

RECORD_MAGIC = b"PKPR"
RECORD_VERSION = 1
FLAG_HAS_BOX = 1
_RECORD_HEADER = struct.Struct("<4sHHII8sQ")
_RECORD_FLOATS = 19  # box 7 + center 2 + noise 2 + augmentation 7 + rotation 1
DATA_FILE = "patches.bin"
INDEX_FILE = "index.json"


def serialize_patch_record(patch):
    """Fixed little-endian byte encoding of one patch record."""
    has_box = patch.box is not None
    noise = patch.noise or CropNoise(0.0, 0.0)
    log = patch.augmentation or AugmentationLog(seed=0)
    box = patch.box.as_array() if has_box else np.zeros(7)
    values = np.concatenate(
        [
            box,
            np.asarray(patch.crop_center, dtype=np.float64),
            [noise.radius, noise.angle],
            [
                float(log.global_mirror),
                log.global_scale,
                float(log.object_mirror),
                log.object_scale,
                log.global_rotation,
                log.object_rotation,
                log.vertical_shift,
            ],
            [patch.rotation],
        ]
    )
    header = _RECORD_HEADER.pack(
        RECORD_MAGIC,
        RECORD_VERSION,
        FLAG_HAS_BOX if has_box else 0,
        len(patch.points),
        patch.object_index,
        patch.frame_id.encode().ljust(8, b"\x00"),
        log.seed,
    )
    points = np.ascontiguousarray(patch.points, dtype="<f8")
    return header + values.astype("<f8").tobytes() + points.tobytes()


def deserialize_patch_record(raw):
    if len(raw) < _RECORD_HEADER.size or raw[:4] != RECORD_MAGIC:
        raise FormatError("not a patch record")
    magic, version, flags, n_points, object_index, frame_id, seed = _RECORD_HEADER.unpack_from(raw)
    if version != RECORD_VERSION:
        raise FormatError(f"unsupported patch record version {version}")
    values = np.frombuffer(raw, dtype="<f8", count=_RECORD_FLOATS, offset=_RECORD_HEADER.size)
    points = np.frombuffer(
        raw,
        dtype="<f8",
        count=n_points * 4,
        offset=_RECORD_HEADER.size + _RECORD_FLOATS * 8,
    ).reshape(-1, 4)
    has_box = bool(flags & FLAG_HAS_BOX)
    log = AugmentationLog(
        seed=seed,
        global_mirror=bool(values[11]),
        global_scale=float(values[12]),
        object_mirror=bool(values[13]),
        object_scale=float(values[14]),
        global_rotation=float(values[15]),
        object_rotation=float(values[16]),
        vertical_shift=float(values[17]),
    )
    return Patch(
        points=points.copy(),
        box=OrientedBox3D.from_array(values[:7]) if has_box else None,
        crop_center=(float(values[7]), float(values[8])),
        noise=CropNoise(float(values[9]), float(values[10])),
        augmentation=log,
        rotation=float(values[18]),
        frame_id=frame_id.rstrip(b"\x00").decode(),
        object_index=int(object_index),
    )


def write_patch_database(directory, patches, metadata, seed):
    """Write records plus the JSON index; byte-identical for equal inputs.

    ``metadata`` is one dict per patch with at least frame_id, object_index,
    and difficulty keys.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = [serialize_patch_record(p) if isinstance(p, Patch) else p for p in patches]
    blob = b"".join(records)
    (directory / DATA_FILE).write_bytes(blob)

    index = {
        "version": 1,
        "seed": seed,
        "count": len(records),
        "data_file": DATA_FILE,
        "data_sha256": hashlib.sha256(blob).hexdigest(),
        "records": [],
    }
    offset = 0
    for record, meta in zip(records, metadata):
        index["records"].append({"offset": offset, "size": len(record), **meta})
        offset += len(record)
    (directory / INDEX_FILE).write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")


class PatchDatabase:
    """Reader for the on-disk patch container."""

    def __init__(self, directory):
        self.directory = Path(directory)
        index_path = self.directory / INDEX_FILE
        if not index_path.is_file():
            raise FormatError(f"{directory}: missing {INDEX_FILE}")
        self.index = json.loads(index_path.read_text())
        self._data = (self.directory / self.index["data_file"]).read_bytes()
        digest = hashlib.sha256(self._data).hexdigest()
        if digest != self.index["data_sha256"]:
            raise DataError(f"{directory}: data file hash mismatch")

    def __len__(self):
        return self.index["count"]

    def record_info(self, i):
        return self.index["records"][i]

    def load(self, i):
        if not 0 <= i < len(self):
            raise ContractError(f"record index {i} out of range [0, {len(self)})")
        info = self.index["records"][i]
        raw = self._data[info["offset"] : info["offset"] + info["size"]]
        return deserialize_patch_record(raw)
