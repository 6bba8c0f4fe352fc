"""Operator command-line surface tying the library into reproducible runs.

Exit codes: 0 on success, 1 for internal failures (including self-check
suite failures), 2 for user-input errors.  Every randomized command prints
the resolved seed, and commands taking a config print the fully resolved
key = value set.
"""

import argparse
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .anchors import match_anchors
from .boxes import OrientedBox3D, rotated_bev_iou
from .codec import (
    decode_residual_batch,
    encode_corners_batch,
    encode_residual_batch,
    write_target_file,
)
from .config import RunConfig, derive_seed, item_seed
from .errors import DataError, PatchkitError
from .evaluation import EvalConfig, GroundTruthObject, evaluate, write_report, write_result_file
from .kitti import (
    KittiDataset,
    camera_box_to_sensor_frame,
    classify_difficulty,
    load_split,
    parse_label_file,
)
from .losses import bce, focal, smooth_l1
from .oracles import (
    brute_force_nms_keep,
    finite_difference,
    naive_group_points,
    rasterized_bev_iou,
)
from .patches import (
    PatchDatabase,
    build_object_surface_lists,
    build_training_patch,
    extract_inference_patch,
    load_labeled_frame,
    serialize_patch_record,
    write_patch_database,
)
from .refinement import DetectionRecord, load_proposals, nms
from .voxels import (
    VoxelGridConfig,
    encode_sample,
    group_points,
    preset_lrn,
    preset_rpn,
    write_encoded_sample,
)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2

# Scene bounds used to reject out-of-range proposals (the RPN input space).
SCENE_X = (0.0, 70.4)
SCENE_Y = (-40.0, 40.0)


def _resolve_config(args):
    config = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    for key in ("data_root", "split", "seed", "workers"):
        value = getattr(args, key.replace("-", "_"), None)
        if value is not None:
            setattr(config, key, value)
    return config


def _print_config(config):
    for line in config.resolved_lines():
        print(f"config: {line}")
    print(f"seed = {config.seed}")


def cmd_inspect(args):
    dataset = KittiDataset(args.data_root)
    frame_id = args.frame
    if not dataset.has_frame(frame_id):
        print(f"error: frame {frame_id} not found under {args.data_root}", file=sys.stderr)
        return EXIT_USAGE
    cloud = dataset.load_cloud(frame_id)
    calib = dataset.load_calibration(frame_id)
    labels = dataset.load_labels(frame_id)
    print(f"frame {frame_id}: {len(cloud)} points")
    histogram = {}
    for label in labels:
        if label.class_name == "DontCare":
            continue
        difficulty = classify_difficulty(label).value
        histogram[difficulty] = histogram.get(difficulty, 0) + 1
        box = camera_box_to_sensor_frame(label, calib)
        print(
            f"  {label.class_name:<12} {difficulty:<9} "
            f"center ({box.cx:7.2f}, {box.cy:7.2f}, {box.cz:6.2f})  "
            f"lwh ({box.l:.2f}, {box.w:.2f}, {box.h:.2f})  yaw {box.yaw:+.3f}"
        )
    for difficulty in ("easy", "moderate", "hard", "ignored"):
        print(f"  {difficulty}: {histogram.get(difficulty, 0)}")
    return EXIT_OK


_WORKER_STATE = {}


def _init_build_worker(objects, surfaces, config):
    _WORKER_STATE["objects"] = objects
    _WORKER_STATE["surfaces"] = surfaces
    _WORKER_STATE["config"] = config


def _build_record(index):
    objects = _WORKER_STATE["objects"]
    config = _WORKER_STATE["config"]
    patch = build_training_patch(
        objects[index],
        _WORKER_STATE["surfaces"],
        item_seed(config.seed, "patch", index),
        config,
    )
    return serialize_patch_record(patch)


def cmd_build_patch_db(args):
    config = _resolve_config(args)
    _print_config(config)
    dataset = KittiDataset(config.data_root)
    frame_ids = load_split(config.split)
    frames = [load_labeled_frame(dataset, fid) for fid in frame_ids]
    objects, surfaces = build_object_surface_lists(
        frames, margin=config.enlarge_margin, patch_size=config.patch_size
    )
    if not objects:
        raise DataError("no objects pass the class/difficulty filters in this split")

    indices = range(len(objects))
    if config.workers > 1:
        with ProcessPoolExecutor(
            max_workers=config.workers,
            initializer=_init_build_worker,
            initargs=(objects, surfaces, config),
        ) as pool:
            records = list(pool.map(_build_record, indices, chunksize=8))
    else:
        _init_build_worker(objects, surfaces, config)
        records = [_build_record(i) for i in indices]

    metadata = [
        {
            "frame_id": obj.frame_id,
            "object_index": obj.object_index,
            "difficulty": obj.difficulty.value,
        }
        for obj in objects
    ]
    write_patch_database(args.out, records, metadata, config.seed)

    histogram = {}
    for meta in metadata:
        histogram[meta["difficulty"]] = histogram.get(meta["difficulty"], 0) + 1
    print(f"patches written: {len(records)} -> {args.out}")
    for difficulty in sorted(histogram):
        print(f"  {difficulty}: {histogram[difficulty]}")
    return EXIT_OK


def cmd_extract(args):
    config = _resolve_config(args)
    _print_config(config)
    dataset = KittiDataset(config.data_root)
    frame_ids = load_split(config.split)
    proposals_by_frame = load_proposals(args.proposals)
    removal_threshold = (
        config.removal_score_threshold if config.removal_score_threshold >= 0 else None
    )

    records = []
    metadata = []
    rotations = []
    skipped = 0
    for frame_id in frame_ids:
        proposals = proposals_by_frame.get(frame_id, [])
        if not proposals:
            continue
        cloud = dataset.load_cloud(frame_id)
        for i, proposal in enumerate(proposals):
            if not (SCENE_X[0] <= proposal.cx <= SCENE_X[1] and SCENE_Y[0] <= proposal.cy <= SCENE_Y[1]):
                print(f"warning: proposal {i} of frame {frame_id} outside scene bounds, skipped")
                skipped += 1
                continue
            patch = extract_inference_patch(
                cloud,
                proposal,
                other_proposals=proposals,
                patch_size=config.patch_size,
                margin=config.enlarge_margin,
                removal_score_threshold=removal_threshold,
            )
            records.append(serialize_patch_record(patch))
            metadata.append({"frame_id": frame_id, "object_index": i, "difficulty": "n/a"})
            rotations.append(
                {
                    "frame_id": frame_id,
                    "proposal_index": i,
                    "rotation": patch.rotation,
                    "crop_center": list(patch.crop_center),
                }
            )
    write_patch_database(args.out, records, metadata, config.seed)
    (Path(args.out) / "rotations.json").write_text(json.dumps(rotations, indent=1) + "\n")
    print(f"patches written: {len(records)} -> {args.out} (skipped {skipped})")
    return EXIT_OK


def cmd_eval(args):
    dataset = KittiDataset(args.data_root)
    frame_ids = load_split(args.split)
    predictions_dir = Path(args.predictions)
    if not predictions_dir.is_dir():
        raise DataError(f"predictions directory not found: {predictions_dir}")

    gts_by_frame = {}
    dets_by_frame = {}
    for frame_id in frame_ids:
        calib = dataset.load_calibration(frame_id)
        gts = []
        for label in dataset.load_labels(frame_id):
            if label.class_name == "DontCare":
                continue
            gts.append(
                GroundTruthObject(
                    box=camera_box_to_sensor_frame(label, calib),
                    difficulty=classify_difficulty(label),
                    class_name=label.class_name,
                )
            )
        gts_by_frame[frame_id] = gts

        dets = []
        pred_path = predictions_dir / f"{frame_id}.txt"
        if pred_path.is_file():
            for label in parse_label_file(pred_path):
                if label.class_name == "DontCare":
                    continue
                dets.append(
                    DetectionRecord(
                        box=camera_box_to_sensor_frame(label, calib),
                        score=label.score if label.score is not None else 1.0,
                        frame_id=frame_id,
                    )
                )
        dets_by_frame[frame_id] = dets

    results = []
    metrics = ("3d", "bev") if args.metric == "both" else (args.metric,)
    for metric in metrics:
        config = EvalConfig(metric=metric, interpolation=args.interp)
        results.append(evaluate(dets_by_frame, gts_by_frame, config))
    for result in results:
        for line in result.report_lines():
            print(line)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_report(out / "report.txt", results)
        write_result_file(out / "result.txt", results)
    return EXIT_OK


def _read_raw_matrix(path, dtype, columns):
    data = np.fromfile(path, dtype=dtype)
    if data.size % columns != 0:
        raise DataError(f"{path}: size {data.size} is not a multiple of {columns}")
    return data.astype(np.float64).reshape(-1, columns)


def cmd_encode(args):
    points = _read_raw_matrix(args.points, "<f4" if args.dtype == "f32" else "<f8", 4)
    grid = preset_lrn() if args.preset == "lrn" else preset_rpn()
    if args.center is not None:
        grid = grid.with_center(*args.center)
    voxels = group_points(points, grid)
    sample = encode_sample(voxels, points)
    if args.out:
        write_encoded_sample(args.out, sample)
    if args.json:
        Path(args.json).write_text(json.dumps(sample.to_dict()) + "\n")
    print(f"encoded {len(sample.coords)} voxels, {len(sample.features)} points")
    return EXIT_OK


def cmd_encode_targets(args):
    gt = _read_raw_matrix(args.gt, "<f8", 7)
    anchors = _read_raw_matrix(args.anchors, "<f8", 7)
    match = match_anchors(anchors, gt)
    k = len(anchors)
    residuals = np.zeros((k, 9))
    direction = np.zeros(k, dtype=np.uint8)
    corners = np.zeros((k, 8))
    matched = match.matched_gt >= 0
    if np.any(matched):
        rows = np.nonzero(matched)[0]
        gt_rows = gt[match.matched_gt[rows]]
        residuals[rows], direction[rows] = encode_residual_batch(gt_rows, anchors[rows])
        corners[rows] = encode_corners_batch(gt_rows, anchors[rows])
    if args.out:
        write_target_file(
            args.out,
            residuals,
            direction,
            corners,
            match.det_label,
            match.reg_positive,
            match.matched_gt,
            num_gt=len(gt),
        )
    if args.json:
        payload = {
            "residuals": residuals.tolist(),
            "direction": direction.tolist(),
            "corners": corners.tolist(),
            "det_labels": match.det_label.tolist(),
            "reg_positive": match.reg_positive.astype(int).tolist(),
            "matched_gt": match.matched_gt.tolist(),
        }
        Path(args.json).write_text(json.dumps(payload) + "\n")
    print(f"targets encoded for {k} anchors against {len(gt)} boxes")
    return EXIT_OK


def cmd_dump_patch(args):
    db = PatchDatabase(args.db)
    patch = db.load(args.index)
    info = db.record_info(args.index)
    payload = {
        "frame_id": patch.frame_id,
        "object_index": patch.object_index,
        "points": patch.points.tolist(),
        "box": patch.box.as_array().tolist() if patch.box is not None else None,
        "crop_center": list(patch.crop_center),
        "noise": [patch.noise.radius, patch.noise.angle],
        "rotation": patch.rotation,
        "augmentation": {
            "seed": patch.augmentation.seed,
            "global_mirror": patch.augmentation.global_mirror,
            "global_scale": patch.augmentation.global_scale,
            "object_mirror": patch.augmentation.object_mirror,
            "object_scale": patch.augmentation.object_scale,
            "global_rotation": patch.augmentation.global_rotation,
            "object_rotation": patch.augmentation.object_rotation,
            "vertical_shift": patch.augmentation.vertical_shift,
        },
        "record": info,
    }
    text = json.dumps(payload)
    if args.json:
        Path(args.json).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Self-check suites


def _check_voxelizer(rng, fault=False):
    grid = VoxelGridConfig(
        origin=(-5.0, -5.0, -2.0),
        extent=(10.0, 10.0, 4.0),
        voxel_size=(0.5, 0.5, 0.5),
        max_points_per_voxel=8,
        max_voxels=400,
    )
    for _ in range(5):
        points = np.column_stack(
            [
                rng.uniform(-6.0, 6.0, 10_000),
                rng.uniform(-6.0, 6.0, 10_000),
                rng.uniform(-2.5, 2.5, 10_000),
                rng.uniform(0.0, 1.0, 10_000),
            ]
        )
        fast = group_points(points, grid)
        coords, members = naive_group_points(points, grid)
        if [tuple(c) for c in fast.coords] != coords:
            return False, "voxel coordinate order mismatch"
        for coord, indices in zip(coords, members.values()):
            if list(fast.entries[coord]) != indices:
                return False, f"membership mismatch in voxel {coord}"
    return True, "grouping matches the naive loop on 5x10k points"


def _check_iou(rng, fault=False):
    for i in range(50):
        a = OrientedBox3D(*rng.uniform(-2, 2, 2), 0.0, *rng.uniform(1.5, 4.5, 2), 1.0, rng.uniform(-np.pi, np.pi))
        b = OrientedBox3D(*rng.uniform(-2, 2, 2), 0.0, *rng.uniform(1.5, 4.5, 2), 1.0, rng.uniform(-np.pi, np.pi))
        exact = rotated_bev_iou(a, b)
        sampled = rasterized_bev_iou(a, b)
        if abs(exact - sampled) >= 1e-3:
            return False, f"pair {i}: clipping {exact:.6f} vs raster {sampled:.6f}"
    return True, "rotated IoU within 1e-3 of 2000x2000 rasterization on 50 pairs"


def _check_codec(rng, fault=False):
    n = 100_000
    gt = np.column_stack(
        [
            rng.uniform(-40, 40, n),
            rng.uniform(-40, 40, n),
            rng.uniform(-3, 1, n),
            rng.uniform(2.5, 5.0, n),
            rng.uniform(1.2, 2.2, n),
            rng.uniform(1.2, 2.0, n),
            rng.uniform(-np.pi, np.pi, n),
        ]
    )
    anchors = gt + 0.0
    anchors[:, :3] += rng.uniform(-1, 1, (n, 3))
    anchors[:, 3:6] *= rng.uniform(0.8, 1.25, (n, 3))
    anchors[:, 6] = rng.choice([0.0, np.pi / 2.0], n)
    u, d = encode_residual_batch(gt, anchors)
    if fault:
        u = u.copy()
        u[:, 0] += 1e-6
    decoded = decode_residual_batch(u, d, anchors)
    diff = decoded - gt
    diff[:, 6] = np.abs(np.remainder(diff[:, 6] + np.pi, 2 * np.pi) - np.pi)
    err = float(np.max(np.abs(diff)))
    if err >= 1e-9:
        return False, f"roundtrip error {err:.3e} exceeds 1e-9"
    return True, f"roundtrip max error {err:.3e} over {n} pairs"


def _check_gradients(rng, fault=False):
    worst = 0.0
    for _ in range(200):
        p = float(rng.uniform(0.05, 0.95))
        t = float(rng.integers(0, 2))
        for fn in (lambda q: bce(q, t), lambda q: focal(q, t)):
            _, grad = fn(p)
            numeric = finite_difference(lambda q: fn(q)[0], p)
            worst = max(worst, abs(grad - numeric) / max(abs(numeric), 1e-12))
        x = float(rng.uniform(-3, 3))
        if abs(abs(x) - 1.0) > 1e-3:  # skip the non-smooth transition point
            _, grad = smooth_l1(np.array([x]), np.array([0.0]))
            numeric = finite_difference(lambda q: smooth_l1(np.array([q]), np.array([0.0]))[0], x)
            worst = max(worst, abs(grad[0] - numeric) / max(abs(numeric), 1e-12))
    if worst >= 1e-4:
        return False, f"gradient relative error {worst:.3e} exceeds 1e-4"
    return True, f"analytic gradients within {worst:.3e} of finite differences"


def _check_nms(rng, fault=False):
    for trial in range(20):
        n = int(rng.integers(2, 13))
        boxes = [
            OrientedBox3D(*rng.uniform(-4, 4, 2), 0.0, *rng.uniform(1.5, 4.0, 2), 1.5, rng.uniform(-np.pi, np.pi))
            for _ in range(n)
        ]
        scores = rng.uniform(0.1, 1.0, n)
        dets = [DetectionRecord(box=b, score=float(s), frame_id="0") for b, s in zip(boxes, scores)]
        kept = nms(dets, iou_threshold=0.1)
        kept_ids = [next(i for i, d in enumerate(dets) if d is k) for k in kept]
        oracle = brute_force_nms_keep(boxes, scores, threshold=0.1)
        if sorted(kept_ids) != sorted(oracle):
            return False, f"trial {trial}: kept {sorted(kept_ids)} vs oracle {sorted(oracle)}"
    return True, "greedy suppression matches the recursive oracle on 20 sets"


SELF_CHECK_SUITES = (
    ("voxelizer", _check_voxelizer),
    ("rotated-iou", _check_iou),
    ("codec-roundtrip", _check_codec),
    ("loss-gradients", _check_gradients),
    ("nms", _check_nms),
)


def cmd_selfcheck(args):
    failures = 0
    print("seed = 0 (suite seeds derive from it)")
    for name, suite in SELF_CHECK_SUITES:
        rng = np.random.default_rng(derive_seed(0, f"selfcheck:{name}"))
        start = time.perf_counter()
        ok, detail = suite(rng, fault=args.inject_fault == name.split("-")[0])
        elapsed = time.perf_counter() - start
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail} ({elapsed:.1f}s)")
        if not ok:
            failures += 1
    if failures:
        print(f"selfcheck failed: {failures} suite(s)", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="patchkit",
        description="Ingestion, encoding, patch, and evaluation pipeline for patch-based 3D detection.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("inspect", help="summarize one frame")
    p.add_argument("frame")
    p.add_argument("--data-root", required=True)
    p.set_defaults(handler=cmd_inspect)

    p = sub.add_parser("build-patch-db", help="construct the training patch database")
    p.add_argument("--data-root")
    p.add_argument("--split")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_build_patch_db)

    p = sub.add_parser("extract", help="extract aligned patches for proposals")
    p.add_argument("--data-root")
    p.add_argument("--split")
    p.add_argument("--proposals", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_extract)

    p = sub.add_parser("eval", help="KITTI-protocol AP over a prediction directory")
    p.add_argument("--predictions", required=True)
    p.add_argument("--data-root", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--metric", choices=("3d", "bev", "both"), default="3d")
    p.add_argument("--interp", choices=("r11", "r40"), default="r11")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("selfcheck", help="run the embedded oracle suites")
    p.add_argument("--inject-fault", choices=("codec",), default=None, help="test mode: force a suite to fail")
    p.set_defaults(handler=cmd_selfcheck)

    p = sub.add_parser("encode", help="voxel-encode a raw point file into the sample container")
    p.add_argument("--points", required=True)
    p.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    p.add_argument("--preset", choices=("lrn", "rpn"), default="lrn")
    p.add_argument("--center", type=float, nargs=2, default=None)
    p.add_argument("--out")
    p.add_argument("--json")
    p.set_defaults(handler=cmd_encode)

    p = sub.add_parser("encode-targets", help="match anchors and encode regression targets")
    p.add_argument("--gt", required=True, help="raw little-endian f64 file, M x 7 boxes")
    p.add_argument("--anchors", required=True, help="raw little-endian f64 file, K x 7 boxes")
    p.add_argument("--out")
    p.add_argument("--json")
    p.set_defaults(handler=cmd_encode_targets)

    p = sub.add_parser("dump-patch", help="dump one patch database record as JSON")
    p.add_argument("--db", required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--json")
    p.set_defaults(handler=cmd_dump_patch)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except PatchkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # pragma: no cover - internal failure path
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
