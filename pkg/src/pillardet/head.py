"""Anchor-based single-class detection head.

Anchors tile the half-resolution head grid, one per cell per heading in
{0, pi/2}, all with one canonical size. Box targets are encoded as
diagonal-normalized center offsets, log size ratios, and the sine of the
heading difference, with a separate two-way heading-sign classifier that
disambiguates the sine at decode time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import difftensor as dt
from .difftensor import nn
from .difftensor import tensor as T
from .geometry import iou_bev_matrix, normalize_angle, rotated_iou_bev
from .pillars import GridSpec
from .scene_io.types import GroundTruthBox

REG_DIM = 7  # dx, dy, dz, dw, dl, dh, dtheta
DIR_DIM = 2
HEAD_CHANNELS_PER_ANCHOR = REG_DIM + DIR_DIM


@dataclass
class AnchorGrid:
    """Flattened anchors in row-major (row, col, heading) order."""

    centers: np.ndarray   # (A, 3)
    sizes: np.ndarray     # (A, 3) as (w, l, h)
    headings: np.ndarray  # (A,)
    shape_hw: tuple       # head-grid (rows, cols)

    @property
    def count(self) -> int:
        return self.centers.shape[0]

    @property
    def diagonals(self) -> np.ndarray:
        """BEV diagonal sqrt(w^2 + l^2), the center-offset normalizer."""
        return np.hypot(self.sizes[:, 0], self.sizes[:, 1])

    def bev5(self) -> np.ndarray:
        return np.column_stack([self.centers[:, 0], self.centers[:, 1],
                                self.sizes[:, 0], self.sizes[:, 1], self.headings])

    def vector7(self) -> np.ndarray:
        return np.column_stack([self.centers, self.sizes, self.headings])


def build_anchors(grid: GridSpec, size=(1.6, 3.9, 1.5), z_center: float = -0.65,
                  headings=(0.0, math.pi / 2.0)) -> AnchorGrid:
    """One anchor per head-grid cell per heading; the head grid is the pillar
    grid at half resolution, so anchors sit at every second-cell center."""
    rows, cols = grid.ny // 2, grid.nx // 2
    vx, vy = grid.voxel_size[0] * 2.0, grid.voxel_size[1] * 2.0
    cx = grid.x_range[0] + (np.arange(cols) + 0.5) * vx
    cy = grid.y_range[0] + (np.arange(rows) + 0.5) * vy
    yy, xx = np.meshgrid(cy, cx, indexing="ij")
    n_cells = rows * cols
    nh = len(headings)
    centers = np.zeros((n_cells, nh, 3))
    centers[:, :, 0] = xx.reshape(-1, 1)
    centers[:, :, 1] = yy.reshape(-1, 1)
    centers[:, :, 2] = z_center
    return AnchorGrid(
        centers=centers.reshape(-1, 3),
        sizes=np.tile(np.asarray(size, dtype=np.float64), (n_cells * nh, 1)),
        headings=np.tile(np.asarray(headings, dtype=np.float64), n_cells),
        shape_hw=(rows, cols),
    )


# -- residual codec ------------------------------------------------------------


def encode_boxes(anchors7: np.ndarray, gt7: np.ndarray):
    """Targets for matched anchor/box pairs, both (P, 7).

    Returns (P, 7) residuals and the (P,) hemisphere bits. Headings are
    pre-normalized into the anchor's +-pi/2 band before the sine residual;
    the bit records the pi added by that wrap, so decode recovers the
    original heading exactly for every input.
    """
    anchors7 = np.asarray(anchors7, dtype=np.float64).reshape(-1, 7)
    gt7 = np.asarray(gt7, dtype=np.float64).reshape(-1, 7)
    if np.any(gt7[:, 3:6] <= 0.0):
        raise ValueError("box sizes must be positive")
    d = np.hypot(anchors7[:, 3], anchors7[:, 4])
    res = np.empty_like(gt7)
    res[:, 0] = (gt7[:, 0] - anchors7[:, 0]) / d
    res[:, 1] = (gt7[:, 1] - anchors7[:, 1]) / d
    res[:, 2] = (gt7[:, 2] - anchors7[:, 2]) / anchors7[:, 5]
    res[:, 3:6] = np.log(gt7[:, 3:6] / anchors7[:, 3:6])
    dtheta = gt7[:, 6] - anchors7[:, 6]
    bits = (np.cos(dtheta) < 0.0).astype(np.int64)
    res[:, 6] = np.sin(normalize_angle(dtheta + math.pi * bits))
    return res, bits


def decode_boxes(anchors7: np.ndarray, residuals: np.ndarray,
                 dir_bits: np.ndarray) -> np.ndarray:
    """Invert encode_boxes. The arcsin is clamped to its domain; a set
    direction bit flips the heading to the opposite hemisphere by adding pi,
    renormalized to (-pi, pi]."""
    anchors7 = np.asarray(anchors7, dtype=np.float64).reshape(-1, 7)
    residuals = np.asarray(residuals, dtype=np.float64).reshape(-1, 7)
    dir_bits = np.asarray(dir_bits, dtype=np.int64).reshape(-1)
    d = np.hypot(anchors7[:, 3], anchors7[:, 4])
    out = np.empty_like(residuals)
    out[:, 0] = residuals[:, 0] * d + anchors7[:, 0]
    out[:, 1] = residuals[:, 1] * d + anchors7[:, 1]
    out[:, 2] = residuals[:, 2] * anchors7[:, 5] + anchors7[:, 2]
    out[:, 3:6] = np.exp(residuals[:, 3:6]) * anchors7[:, 3:6]
    theta = anchors7[:, 6] + np.arcsin(np.clip(residuals[:, 6], -1.0, 1.0))
    out[:, 6] = normalize_angle(theta + math.pi * (dir_bits == 1))
    return out


# -- matching ------------------------------------------------------------------


@dataclass
class MatchResult:
    labels: np.ndarray       # (A,) 1 positive, 0 negative, -1 ignored
    assigned_gt: np.ndarray  # (A,) gt index for positives, -1 elsewhere

    @property
    def pos_idx(self) -> np.ndarray:
        return np.flatnonzero(self.labels == 1)

    @property
    def neg_idx(self) -> np.ndarray:
        return np.flatnonzero(self.labels == 0)

    @property
    def n_pos(self) -> int:
        return int((self.labels == 1).sum())


def match_anchors(anchors: AnchorGrid, gt_boxes: list[GroundTruthBox],
                  pos_iou: float = 0.6, neg_iou: float = 0.45) -> MatchResult:
    """BEV-IoU assignment with unconditional best-anchor forcing.

    Anchors above pos_iou with their best box are positive, below neg_iou
    negative, otherwise ignored. Every box then claims its single highest-IoU
    anchor as positive regardless of threshold, so no box goes unsupervised;
    ties take the lower anchor index.
    """
    if not (0.0 < neg_iou <= pos_iou < 1.0):
        raise ValueError(f"need 0 < neg_iou <= pos_iou < 1, got "
                         f"({pos_iou}, {neg_iou})")
    a = anchors.count
    labels = np.zeros(a, dtype=np.int64)
    assigned = np.full(a, -1, dtype=np.int64)
    if not gt_boxes:
        return MatchResult(labels=labels, assigned_gt=assigned)
    gt5 = np.stack([b.bev5() for b in gt_boxes])
    iou = iou_bev_matrix(anchors.bev5(), gt5)  # (A, G)
    best_gt = np.argmax(iou, axis=1)
    best_iou = iou[np.arange(a), best_gt]
    labels[:] = -1
    labels[best_iou < neg_iou] = 0
    pos = best_iou > pos_iou
    labels[pos] = 1
    assigned[pos] = best_gt[pos]
    # forcing: argmax over anchors returns the first (lowest) index on ties
    for g in range(len(gt_boxes)):
        a_star = int(np.argmax(iou[:, g]))
        labels[a_star] = 1
        assigned[a_star] = g
    return MatchResult(labels=labels, assigned_gt=assigned)


# -- losses --------------------------------------------------------------------


def smooth_l1(diff: T.Tensor) -> T.Tensor:
    """Elementwise Huber: 0.5 x^2 inside the unit corridor, |x| - 0.5 outside."""
    a = dt.tensor.abs_(diff)
    quad = dt.tensor.mul(dt.tensor.mul(diff, diff), 0.5)
    lin = dt.tensor.sub(a, 0.5)
    return dt.tensor.where(a.data < 1.0, quad, lin)


def focal_loss_sum(logits: T.Tensor, targets: np.ndarray, alpha: float = 0.25,
                   gamma: float = 2.0) -> T.Tensor:
    """Summed binary focal loss on logits; logits are clamped to +-30 so the
    probabilities stay strictly inside (0, 1) in float64."""
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if logits.shape != targets.shape:
        raise ValueError(f"logits {logits.shape} vs targets {targets.shape}")
    x = dt.tensor.clip(logits, -30.0, 30.0)
    p = dt.tensor.sigmoid(x)
    is_pos = targets > 0.5
    pt = dt.tensor.where(is_pos, p, dt.tensor.sub(1.0, p))
    alpha_t = np.where(is_pos, alpha, 1.0 - alpha)
    weight = dt.tensor.mul(dt.tensor.pow_(dt.tensor.sub(1.0, pt), gamma), alpha_t)
    return dt.tensor.neg(dt.tensor.sum_(dt.tensor.mul(weight, dt.tensor.log(pt))))


def direction_loss_sum(logits: T.Tensor, bits: np.ndarray) -> T.Tensor:
    """Summed softmax cross-entropy over the two heading-sign bins."""
    bits = np.asarray(bits, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[1] != DIR_DIM or logits.shape[0] != bits.shape[0]:
        raise ValueError(f"direction logits {logits.shape} vs bits {bits.shape}")
    if bits.size == 0:
        return T.Tensor(0.0)
    shift = T.Tensor(logits.data.max(axis=1, keepdims=True))
    z = dt.tensor.sub(logits, shift)
    logsum = dt.tensor.log(dt.tensor.sum_(dt.tensor.exp(z), axis=1, keepdims=True))
    logp = dt.tensor.sub(z, logsum)
    picked = dt.tensor.take_along_axis1(logp, bits[:, None])
    return dt.tensor.neg(dt.tensor.sum_(picked))


def regression_loss_sum(pred_res: T.Tensor, target_res: np.ndarray) -> T.Tensor:
    """Summed smooth-L1 over the 7 residual components of positive anchors."""
    target_res = np.asarray(target_res, dtype=np.float64)
    if pred_res.shape != target_res.shape:
        raise ValueError(f"residuals {pred_res.shape} vs targets {target_res.shape}")
    return dt.tensor.sum_(smooth_l1(dt.tensor.sub(pred_res, T.Tensor(target_res))))


LOSS_WEIGHTS = {"reg": 2.0, "dir": 0.2, "cls": 1.0, "mem": 1.0}


def combine_losses(l_reg: T.Tensor, l_dir: T.Tensor, l_cls: T.Tensor,
                   l_mem: T.Tensor, n_pos: int,
                   weights: dict | None = None) -> T.Tensor:
    """Weighted sum of the four summed losses, normalized by the positive
    count (floored at one so empty scenes stay finite)."""
    w = LOSS_WEIGHTS if weights is None else weights
    total = dt.tensor.add(
        dt.tensor.add(dt.tensor.mul(l_reg, w["reg"]),
                      dt.tensor.mul(l_dir, w["dir"])),
        dt.tensor.add(dt.tensor.mul(l_cls, w["cls"]),
                      dt.tensor.mul(l_mem, w["mem"])))
    return dt.tensor.div(total, float(max(n_pos, 1)))


# -- NMS and prediction ----------------------------------------------------------


def nms_bev(bev5: np.ndarray, scores: np.ndarray, iou_thr: float) -> np.ndarray:
    """Greedy non-maximum suppression on rotated BEV boxes.

    Boxes are visited in descending score order (ties keep the lower input
    index); a box is kept unless it overlaps an already-kept box with IoU
    strictly above the threshold. Returns kept indices in visit order.
    """
    bev5 = np.asarray(bev5, dtype=np.float64).reshape(-1, 5)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.argsort(-scores, kind="stable")
    kept: list[int] = []
    for i in order:
        if all(rotated_iou_bev(bev5[i], bev5[j]) <= iou_thr for j in kept):
            kept.append(int(i))
    return np.array(kept, dtype=np.int64)


@dataclass
class Detection:
    box7: np.ndarray
    score: float
    label: str = "Car"
    scene_id: str = ""

    def bev5(self) -> np.ndarray:
        b = self.box7
        return np.array([b[0], b[1], b[3], b[4], b[6]])


class DetectionHead(nn.Module):
    """Two 1x1 conv branches over the fused map: 9 regression channels per
    anchor (7 residuals + 2 heading-sign logits) and 1 objectness logit."""

    def __init__(self, name: str, in_channels: int, n_headings: int,
                 rng: np.random.Generator, prior: float = 0.01):
        self.n_headings = n_headings
        self.reg_conv = nn.Conv2d(f"{name}.reg", in_channels,
                                  n_headings * HEAD_CHANNELS_PER_ANCHOR, 1, rng)
        self.cls_conv = nn.Conv2d(f"{name}.cls", in_channels, n_headings, 1, rng)
        # rare-positive prior keeps the initial classification loss small
        self.cls_conv.bias.data = np.full(n_headings, -math.log((1.0 - prior) / prior))

    def __call__(self, fused: T.Tensor):
        """Returns reg (A, 9) and cls logits (A,), anchor order row-major by
        (row, col) with heading innermost."""
        _, h, w = fused.shape
        nh = self.n_headings
        reg_map = self.reg_conv(fused)   # (nh*9, h, w)
        cls_map = self.cls_conv(fused)   # (nh, h, w)
        reg = dt.tensor.reshape(
            dt.tensor.transpose(
                dt.tensor.reshape(reg_map, (nh, HEAD_CHANNELS_PER_ANCHOR, h, w)),
                (2, 3, 0, 1)),
            (h * w * nh, HEAD_CHANNELS_PER_ANCHOR))
        cls = dt.tensor.reshape(dt.tensor.transpose(cls_map, (1, 2, 0)), (h * w * nh,))
        return reg, cls

    def predict(self, fused: T.Tensor, anchors: AnchorGrid, score_thr: float = 0.3,
                nms_iou: float = 0.1) -> list[Detection]:
        """Decode detections: sigmoid scores strictly above the threshold,
        then greedy NMS."""
        if anchors.count != fused.shape[1] * fused.shape[2] * self.n_headings:
            raise ValueError("anchor grid does not match head output resolution")
        with dt.no_grad():
            reg, cls = self(fused)
            scores = 1.0 / (1.0 + np.exp(-cls.data))
            keep = np.flatnonzero(scores > score_thr)
            if keep.size == 0:
                return []
            res = reg.data[keep, :REG_DIM]
            dir_bits = np.argmax(reg.data[keep, REG_DIM:], axis=1)
            boxes7 = decode_boxes(anchors.vector7()[keep], res, dir_bits)
            bev = np.column_stack([boxes7[:, 0], boxes7[:, 1], boxes7[:, 3],
                                   boxes7[:, 4], boxes7[:, 6]])
            kept = nms_bev(bev, scores[keep], nms_iou)
            return [Detection(box7=boxes7[i].copy(), score=float(scores[keep][i]))
                    for i in kept]
