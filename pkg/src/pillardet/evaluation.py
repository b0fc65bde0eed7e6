"""Detection metrics: greedy IoU matching and 40-point average precision."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import rotated_iou_bev
from .head import Detection
from .scene_io.types import GroundTruthBox

RECALL_POINTS = 40


@dataclass
class SceneMatches:
    """Per-detection outcomes for one scene, score-descending order."""

    scores: np.ndarray  # (D,)
    is_tp: np.ndarray   # (D,) bool
    n_gt: int


def match_scene(detections: list[Detection], gt_boxes: list[GroundTruthBox],
                iou_thr: float = 0.5) -> SceneMatches:
    """Greedy matching in descending score order (ties keep the lower input
    index). A detection is a true positive iff its best-IoU unmatched box
    reaches the threshold; each box is consumed by at most one detection.
    """
    scores = np.array([d.score for d in detections], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    taken = np.zeros(len(gt_boxes), dtype=bool)
    gt_bev = [b.bev5() for b in gt_boxes]
    out_scores = np.empty(len(detections), dtype=np.float64)
    out_tp = np.zeros(len(detections), dtype=bool)
    for rank, di in enumerate(order):
        det_bev = detections[di].bev5()
        best_iou, best_g = 0.0, -1
        for g, bev in enumerate(gt_bev):
            if taken[g]:
                continue
            iou = rotated_iou_bev(det_bev, bev)
            if iou > best_iou:
                best_iou, best_g = iou, g
        hit = best_g >= 0 and best_iou >= iou_thr
        if hit:
            taken[best_g] = True
        out_scores[rank] = scores[di]
        out_tp[rank] = hit
    return SceneMatches(scores=out_scores, is_tp=out_tp, n_gt=len(gt_boxes))


def average_precision(matches: list[SceneMatches]) -> float:
    """AP over a fixed grid of 40 recall thresholds {1/40, ..., 40/40}.

    All detections are pooled across scenes and sorted by score; each grid
    point contributes the maximum precision attained at recall >= threshold,
    zero if that recall is never reached.
    """
    n_gt = sum(m.n_gt for m in matches)
    if n_gt == 0:
        return 0.0
    scores = np.concatenate([m.scores for m in matches]) if matches else np.empty(0)
    tps = np.concatenate([m.is_tp for m in matches]) if matches else np.empty(0, bool)
    if scores.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp_cum = np.cumsum(tps[order].astype(np.float64))
    fp_cum = np.cumsum((~tps[order]).astype(np.float64))
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)
    ap = 0.0
    for i in range(1, RECALL_POINTS + 1):
        r = i / RECALL_POINTS
        at_least = precision[recall >= r - 1e-12]
        ap += float(at_least.max()) if at_least.size else 0.0
    return ap / RECALL_POINTS


@dataclass
class EvalReport:
    ap: float
    n_scenes: int
    n_gt: int
    n_detections: int
    iou_thr: float
    per_scene: list[SceneMatches] = field(repr=False, default_factory=list)

    def line(self) -> str:
        return (f"AP@{RECALL_POINTS}={self.ap:.4f} scenes={self.n_scenes} "
                f"gt={self.n_gt} det={self.n_detections} iou_thr={self.iou_thr:g}")


def evaluate_scenes(all_detections: list[list[Detection]],
                    all_gt: list[list[GroundTruthBox]],
                    iou_thr: float = 0.5) -> EvalReport:
    if len(all_detections) != len(all_gt):
        raise ValueError("detections and ground truth must have equal scene counts")
    matches = [match_scene(d, g, iou_thr) for d, g in zip(all_detections, all_gt)]
    return EvalReport(
        ap=average_precision(matches),
        n_scenes=len(matches),
        n_gt=sum(m.n_gt for m in matches),
        n_detections=sum(m.scores.size for m in matches),
        iou_thr=iou_thr,
        per_scene=matches,
    )
