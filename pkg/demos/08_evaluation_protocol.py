"""The AP protocol in isolation: matching, ignored classes, interpolation."""

import numpy as np

from patchkit.boxes import OrientedBox3D
from patchkit.evaluation import EvalConfig, GroundTruthObject, evaluate, match_frame
from patchkit.boxes import iou_3d
from patchkit.kitti import Difficulty
from patchkit.refinement import DetectionRecord


def car(cx, cy=0.0):
    return OrientedBox3D(cx, cy, -1.0, 4.0, 2.0, 1.5, 0.0)


# Greedy one-to-one matching at the 70% IoU bar.
target = car(0.0)
near_miss = OrientedBox3D(0.74, 0.0, -1.0, 4.0, 2.0, 1.5, 0.0)  # IoU ~ 0.688
dets = [DetectionRecord(box=near_miss, score=0.9, frame_id="0")]
status, _ = match_frame(dets, [target], [False], iou_3d, threshold=0.7)
print(f"IoU {iou_3d(near_miss, target):.3f} vs threshold 0.7 -> status {status[0]} (-1 = FP)")

# A small PR table worked end to end: 2 TPs and 2 FPs over 3 targets.
gts = {"000000": [GroundTruthObject(box=car(x), difficulty=Difficulty.EASY) for x in (0.0, 20.0, 40.0)]}
dets = {
    "000000": [
        DetectionRecord(box=car(0.0), score=0.9, frame_id="000000"),
        DetectionRecord(box=car(60.0), score=0.8, frame_id="000000"),
        DetectionRecord(box=car(20.0), score=0.7, frame_id="000000"),
        DetectionRecord(box=car(80.0), score=0.6, frame_id="000000"),
    ]
}
for interp in ("r11", "r40"):
    result = evaluate(dets, gts, EvalConfig(interpolation=interp))
    print(f"{interp}: AP easy = {result.ap['easy']:.4f} "
          f"(counts {result.counts['easy']})")
print("R11 hand value: 100 * 6/11 =", 100 * 6 / 11)

# Vans are neutral for car evaluation: matching one is neither TP nor FP.
gts_with_van = {
    "000000": [
        GroundTruthObject(box=car(0.0), difficulty=Difficulty.EASY, class_name="Van"),
        GroundTruthObject(box=car(20.0), difficulty=Difficulty.EASY),
    ]
}
dets_on_van = {
    "000000": [
        DetectionRecord(box=car(0.0), score=0.9, frame_id="000000"),
        DetectionRecord(box=car(20.0), score=0.8, frame_id="000000"),
    ]
}
result = evaluate(dets_on_van, gts_with_van)
print("\nwith a Van in the scene:", result.counts["easy"], "-> AP", result.ap["easy"])
