"""End-to-end refinement glue: proposals -> patches -> scorer -> detections.

The scorer is a plug-in callable mapping a Patch to per-anchor outputs; a
trained network and the mock oracle scorer below are interchangeable here.
Decoded boxes are rotated back from the patch's depth-axis-aligned frame
into the scene frame using the rotation recorded at extraction time.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .anchors import AnchorGridSpec, generate_anchors, match_anchors
from .boxes import OrientedBox3D, rotate_about_z, rotated_bev_iou
from .codec import RESIDUAL_DIM, decode_residual_batch, encode_residual_batch
from .errors import ContractError, FormatError
from .patches import extract_inference_patch

DEFAULT_SCORE_THRESHOLD = 0.05
DEFAULT_NMS_IOU = 0.01


@dataclass
class Proposal:
    """Coarse BEV object location from a first-stage detector."""

    frame_id: str
    cx: float
    cy: float
    score: float
    box: OrientedBox3D | None = None
    source: str = "external"


@dataclass
class ScorerOutput:
    """Per-anchor network-boundary outputs for one patch."""

    detection: np.ndarray  # (K,) probabilities
    residuals: np.ndarray  # (K, 9)
    direction: np.ndarray  # (K,) probabilities

    def validate(self, num_anchors):
        self.detection = np.asarray(self.detection, dtype=np.float64)
        self.residuals = np.asarray(self.residuals, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if self.detection.shape != (num_anchors,):
            raise ContractError(
                f"scorer detection shape {self.detection.shape} != ({num_anchors},)"
            )
        if self.residuals.shape != (num_anchors, RESIDUAL_DIM):
            raise ContractError(
                f"scorer residual shape {self.residuals.shape} != ({num_anchors}, {RESIDUAL_DIM})"
            )
        if self.direction.shape != (num_anchors,):
            raise ContractError(
                f"scorer direction shape {self.direction.shape} != ({num_anchors},)"
            )


@dataclass
class DetectionRecord:
    box: OrientedBox3D  # scene frame
    score: float
    frame_id: str


def load_proposals(path):
    """Parse a proposal file into per-frame lists.

    Lines are either ``frame_id x y score`` or
    ``frame_id x y z l w h yaw score``.
    """
    path = Path(path)
    by_frame = {}
    for line_no, line in enumerate(path.read_text().splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) not in (4, 9):
            raise FormatError(f"{path}: line {line_no}: expected 4 or 9 fields, got {len(fields)}")
        try:
            values = [float(v) for v in fields[1:]]
        except ValueError as exc:
            raise FormatError(f"{path}: line {line_no}: unparsable number") from exc
        box = None
        if len(values) == 8:
            box = OrientedBox3D(values[0], values[1], values[2], values[3], values[4], values[5], values[6])
        proposal = Proposal(
            frame_id=fields[0],
            cx=values[0],
            cy=values[1],
            score=values[-1],
            box=box,
        )
        by_frame.setdefault(proposal.frame_id, []).append(proposal)
    return by_frame


def proposals_from_boxes(frame_id, boxes, score=1.0, source="ground-truth"):
    """Wrap ground-truth boxes as proposals (the upper-bound RPN row)."""
    return [
        Proposal(frame_id=frame_id, cx=b.cx, cy=b.cy, score=score, box=b, source=source)
        for b in boxes
    ]


def oracle_scorer(gt_boxes_by_frame, patch_size=9.6, anchor_kwargs=None):
    """Mock scorer that emits the exact encoding of the nearest ground truth.

    For the patch's best-matching anchor it produces detection probability
    1, the true residual targets, and the true direction bit; every other
    anchor stays silent.  Plugged into ``refine`` it must reproduce the
    ground truth bit-exactly up to floating-point rotation error.
    """
    anchor_kwargs = anchor_kwargs or {}

    def scorer(patch):
        spec = AnchorGridSpec.for_patch(patch.crop_center, patch_size=patch_size, **anchor_kwargs)
        anchors = generate_anchors(spec)
        k = len(anchors)
        detection = np.zeros(k)
        residuals = np.zeros((k, RESIDUAL_DIM))
        direction = np.zeros(k)
        boxes = gt_boxes_by_frame.get(patch.frame_id, [])
        if boxes:
            aligned = [rotate_about_z(b, patch.rotation) for b in boxes]
            center = np.asarray(patch.crop_center)
            nearest = min(
                aligned, key=lambda b: float(np.hypot(b.cx - center[0], b.cy - center[1]))
            )
            match = match_anchors(anchors, nearest.as_array()[None, :])
            best = int(np.argmax(match.best_iou))
            u, d = encode_residual_batch(nearest.as_array()[None, :], anchors[best][None, :])
            detection[best] = 1.0
            residuals[best] = u[0]
            direction[best] = float(d[0])
        return ScorerOutput(detection=detection, residuals=residuals, direction=direction)

    return scorer


def refine(
    cloud,
    proposals,
    scorer,
    patch_size=9.6,
    margin=0.2,
    score_threshold=DEFAULT_SCORE_THRESHOLD,
    detections_per_patch=1,
    removal_score_threshold=None,
    anchor_kwargs=None,
):
    """Refine per-frame proposals into scene-frame detection records.

    Per proposal: extract the aligned patch, score it, decode the top
    ``detections_per_patch`` anchors above ``score_threshold``, and rotate
    the decoded boxes back into the scene frame.
    """
    anchor_kwargs = anchor_kwargs or {}
    detections = []
    for proposal in proposals:
        patch = extract_inference_patch(
            cloud,
            proposal,
            other_proposals=proposals,
            patch_size=patch_size,
            margin=margin,
            removal_score_threshold=removal_score_threshold,
        )
        spec = AnchorGridSpec.for_patch(patch.crop_center, patch_size=patch_size, **anchor_kwargs)
        anchors = generate_anchors(spec)
        output = scorer(patch)
        output.validate(len(anchors))

        order = np.argsort(-output.detection, kind="stable")[:detections_per_patch]
        for idx in order:
            score = float(output.detection[idx])
            if score < score_threshold:
                continue
            decoded = decode_residual_batch(
                output.residuals[idx][None, :],
                np.array([1 if output.direction[idx] > 0.5 else 0]),
                anchors[idx][None, :],
            )[0]
            box = rotate_about_z(OrientedBox3D.from_array(decoded), -patch.rotation)
            detections.append(DetectionRecord(box=box, score=score, frame_id=proposal.frame_id))
    return detections


def nms(detections, iou_threshold=DEFAULT_NMS_IOU):
    """Greedy rotated-BEV non-maximum suppression, stable on score ties."""
    if not 0.0 <= iou_threshold <= 1.0:
        raise ContractError(f"iou threshold out of [0, 1]: {iou_threshold}")
    order = np.argsort(-np.array([d.score for d in detections]), kind="stable")
    kept = []
    for idx in order:
        candidate = detections[int(idx)]
        if all(rotated_bev_iou(candidate.box, k.box) <= iou_threshold for k in kept):
            kept.append(candidate)
    return kept
