"""KITTI-protocol average precision over the three difficulty levels.

For each evaluated difficulty, ground truths of a stricter-or-equal
difficulty class are targets; looser classes, the ignored class, and
configured ignore classes (``Van`` for cars) neither reward nor penalize a
match.  Detections are greedily matched one-to-one in descending score
order at the configured IoU threshold; precision is sampled at 11 or 40
interpolation recall points and AP is the mean interpolated precision in
percent.

Detections below the 2D minimum-height filter of the official devkit are
NOT removed here: evaluation happens purely in 3D/BEV space.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boxes import iou_3d, rotated_bev_iou
from .errors import ContractError
from .kitti import Difficulty

EVAL_LEVELS = (Difficulty.EASY, Difficulty.MODERATE, Difficulty.HARD)
DEFAULT_IGNORED_CLASSES = ("Van",)


@dataclass
class GroundTruthObject:
    box: object  # OrientedBox3D
    difficulty: Difficulty
    class_name: str = "Car"


@dataclass
class EvalConfig:
    iou_threshold: float = 0.7
    metric: str = "3d"  # "3d" or "bev"
    interpolation: str = "r11"  # "r11" or "r40"
    class_name: str = "Car"
    ignored_classes: tuple = DEFAULT_IGNORED_CLASSES

    def __post_init__(self):
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ContractError(f"iou threshold out of (0, 1]: {self.iou_threshold}")
        if self.metric not in ("3d", "bev"):
            raise ContractError(f"unknown metric {self.metric!r}")
        if self.interpolation not in ("r11", "r40"):
            raise ContractError(f"unknown interpolation {self.interpolation!r}")

    @property
    def iou_fn(self):
        return iou_3d if self.metric == "3d" else rotated_bev_iou

    @property
    def recall_points(self):
        if self.interpolation == "r11":
            return np.linspace(0.0, 1.0, 11)
        return np.linspace(1.0 / 40.0, 1.0, 40)


TP = 1
IGNORED_MATCH = 0
FP = -1


def match_frame(detections, gt_boxes, gt_ignored, iou_fn, threshold):
    """Greedy one-to-one matching for a single frame.

    Returns (per-detection status in input order, per-gt matched flags).
    Each detection, in descending score order, takes the highest-IoU
    unmatched valid ground truth at or above the threshold; failing that, a
    sufficient overlap with an ignored ground truth marks it neutral, and
    otherwise it is a false positive.
    """
    status = np.full(len(detections), FP, dtype=np.int8)
    matched = np.zeros(len(gt_boxes), dtype=bool)
    order = np.argsort(-np.array([d.score for d in detections]), kind="stable")
    for det_idx in order:
        det = detections[int(det_idx)]
        best_gt = -1
        best_iou = threshold
        best_ignored_iou = 0.0
        hit_ignored = False
        for gt_idx, gt_box in enumerate(gt_boxes):
            overlap = iou_fn(det.box, gt_box)
            if gt_ignored[gt_idx]:
                if overlap >= threshold and overlap > best_ignored_iou:
                    best_ignored_iou = overlap
                    hit_ignored = True
                continue
            if matched[gt_idx]:
                continue
            if overlap >= best_iou:
                if overlap > best_iou or best_gt < 0:
                    best_gt = gt_idx
                    best_iou = overlap
        if best_gt >= 0:
            status[det_idx] = TP
            matched[best_gt] = True
        elif hit_ignored:
            status[det_idx] = IGNORED_MATCH
    return status, matched


@dataclass
class EvalResult:
    ap: dict  # difficulty value -> AP percentage
    curves: dict  # difficulty value -> (recall, precision) arrays
    counts: dict  # difficulty value -> dict(tp, fp, fn, num_targets)
    config: EvalConfig

    def report_lines(self):
        metric = self.config.metric.upper()
        lines = [
            f"AP ({metric}, IoU >= {self.config.iou_threshold:.2f}, "
            f"{self.config.interpolation.upper()}, class {self.config.class_name})"
        ]
        for level in EVAL_LEVELS:
            c = self.counts[level.value]
            lines.append(
                f"  {level.value:<9} AP = {self.ap[level.value]:6.2f}   "
                f"(tp {c['tp']}, fp {c['fp']}, fn {c['fn']}, targets {c['num_targets']})"
            )
        return lines

    def result_entries(self):
        """Flat key = value pairs for the machine-readable result file.

        Keys are metric-prefixed so several results can share one file.
        """
        metric = self.config.metric
        entries = {
            f"{metric}_interpolation": self.config.interpolation,
            f"{metric}_iou_threshold": self.config.iou_threshold,
            f"{metric}_class": self.config.class_name,
        }
        for level in EVAL_LEVELS:
            entries[f"ap_{metric}_{level.value}"] = self.ap[level.value]
        return entries


def _interpolated_ap(scores, flags, num_targets, recall_points):
    """Mean interpolated precision (in percent) plus the PR curve."""
    if num_targets == 0 or len(scores) == 0:
        return 0.0, (np.zeros(0), np.zeros(0))
    order = np.argsort(-np.asarray(scores), kind="stable")
    tp = np.cumsum(np.asarray(flags)[order] == TP)
    fp = np.cumsum(np.asarray(flags)[order] == FP)
    recall = tp / num_targets
    precision = tp / np.maximum(tp + fp, 1)
    interpolated = []
    for point in recall_points:
        reachable = precision[recall >= point]
        interpolated.append(float(reachable.max()) if reachable.size else 0.0)
    return 100.0 * float(np.mean(interpolated)), (recall, precision)


def evaluate(detections_by_frame, gts_by_frame, config=None):
    """KITTI-protocol AP per difficulty level.

    ``detections_by_frame`` maps frame id to DetectionRecord lists;
    ``gts_by_frame`` maps frame id to GroundTruthObject lists.  Every
    detection frame must exist in the ground-truth mapping.
    """
    config = config or EvalConfig()
    unknown = set(detections_by_frame) - set(gts_by_frame)
    if unknown:
        raise ContractError(f"detections reference unknown frames: {sorted(unknown)[:5]}")

    ap = {}
    curves = {}
    counts = {}
    for level in EVAL_LEVELS:
        scores = []
        flags = []
        num_targets = 0
        tp_total = fp_total = 0
        for frame_id in sorted(gts_by_frame):
            gts = gts_by_frame[frame_id]
            relevant = [g for g in gts if g.class_name == config.class_name or g.class_name in config.ignored_classes]
            gt_boxes = [g.box for g in relevant]
            gt_ignored = [
                g.class_name in config.ignored_classes
                or g.difficulty is Difficulty.IGNORED
                or g.difficulty.rank > level.rank
                for g in relevant
            ]
            num_targets += len(gt_ignored) - sum(gt_ignored)
            dets = detections_by_frame.get(frame_id, [])
            status, _ = match_frame(dets, gt_boxes, gt_ignored, config.iou_fn, config.iou_threshold)
            for det, flag in zip(dets, status):
                if flag != IGNORED_MATCH:
                    scores.append(det.score)
                    flags.append(flag)
            tp_total += int(np.sum(status == TP))
            fp_total += int(np.sum(status == FP))
        level_ap, curve = _interpolated_ap(scores, flags, num_targets, config.recall_points)
        ap[level.value] = level_ap
        curves[level.value] = curve
        counts[level.value] = {
            "tp": tp_total,
            "fp": fp_total,
            "fn": num_targets - tp_total,
            "num_targets": num_targets,
        }
    return EvalResult(ap=ap, curves=curves, counts=counts, config=config)


def write_report(path, results):
    """Plain-text report for one or more EvalResults."""
    lines = []
    for result in results:
        lines.extend(result.report_lines())
        lines.append("")
    Path(path).write_text("\n".join(lines))


def write_result_file(path, results):
    """Machine-readable key = value result file."""
    lines = []
    for result in results:
        for key, value in result.result_entries().items():
            lines.append(f"{key} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")
