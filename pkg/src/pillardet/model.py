"""Detector assembly: both encoders, the memory, backbone, and head in one
module tree.

Three variants share the tree. "voxel" is the plain pillar baseline: the
voxel stream alone feeds the backbone. "voxel_point" adds the point stream,
its pillar fusion, and the memory with its alignment loss. "full" adds the
scale-descriptor attention over the backbone levels on top of that.

Training reads the bank in parallel with the point fusion so the alignment
loss can pull them together; inference reads only the bank, through the very
same read op, and never touches the point stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import difftensor as dt
from .backbone import Backbone, ScaleAttentiveFusion, ScaleFeatureNet, ScalePyramid
from .config import RunConfig
from .difftensor import nn
from .difftensor import tensor as T
from .encoder import PointStreamEncoder, TinyPointNet, build_fused_image, fuse_point_features
from .errors import CheckpointError
from .head import (DetectionHead, Detection, build_anchors, combine_losses, direction_loss_sum,
                   encode_boxes, focal_loss_sum, match_anchors, regression_loss_sum)
from .memory import MemoryBank, mean_alignment_distance, memory_alignment_loss
from .pillars import POINT_FEATURE_DIM, PillarBatch, scatter_to_image
from .scene_io.types import GroundTruthBox


@dataclass
class TrainStepLosses:
    """One scene's losses: the differentiable total plus logging components.

    The component fields are the raw per-term sums before weighting, so the
    metrics log shows each term on its own scale.
    """

    total: T.Tensor
    reg: float
    dir: float
    cls: float
    mem: float
    n_pos: int
    alignment: float  # mean per-pillar readout distance, monitoring only


class Detector(nn.Module):
    def __init__(self, cfg: RunConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.grid = cfg.grid.spec()
        self.variant = cfg.variant
        self.with_points = cfg.variant != "voxel"
        self.with_scale_attention = cfg.variant == "full"

        c = cfg.encoder.channels
        self.voxel_net = TinyPointNet("voxel_net", POINT_FEATURE_DIM, c, rng)
        if self.with_points:
            self.point_net = PointStreamEncoder(
                "point_net", c, rng, radii=cfg.encoder.sa_radii,
                max_samples=cfg.encoder.sa_max_samples)
            self.memory = MemoryBank("memory", cfg.memory.items, c, rng)
        in_channels = 2 * c if self.with_points else c
        self.backbone = Backbone("backbone", in_channels, c, cfg.backbone.depth, rng)
        if self.with_scale_attention:
            self.scale_net = ScaleFeatureNet("scale_net", c, rng)
            self.scale_pyramid = ScalePyramid("scale_pyramid", c, rng)
        self.neck = ScaleAttentiveFusion("neck", c, rng,
                                         attention=self.with_scale_attention)
        self.anchors = build_anchors(self.grid)
        self.head = DetectionHead("head", self.neck.out_channels,
                                  n_headings=2, rng=rng)

    # -- forward pieces ------------------------------------------------------

    def pillar_features(self, batch: PillarBatch) -> T.Tensor:
        """(C, N) voxel-stream feature per pillar."""
        return self.voxel_net(batch.features, batch.counts)

    def _point_cloud(self, batch: PillarBatch, points: np.ndarray | None) -> np.ndarray:
        if self.cfg.point_stream_input == "raw":
            if points is None:
                raise ValueError("point_stream_input 'raw' needs the scene points")
            return np.asarray(points, dtype=np.float64).reshape(-1, 4)
        return batch.flatten_points()

    def _head_map(self, image: T.Tensor, batch: PillarBatch) -> T.Tensor:
        levels = self.backbone(image)
        scale_maps = None
        if self.with_scale_attention:
            scale_maps = self.scale_pyramid(self.scale_net(batch, self.grid))
        return self.neck(levels, scale_maps)

    # -- training ------------------------------------------------------------

    def forward_train(self, batch: PillarBatch, boxes: list[GroundTruthBox],
                      points: np.ndarray | None = None) -> TrainStepLosses:
        """Losses for one scene; the head trains on the configured image."""
        f_vox = self.pillar_features(batch)
        l_mem = T.Tensor(0.0)
        alignment = 0.0
        if self.with_points:
            cloud = self._point_cloud(batch, points)
            if cloud.shape[0] > 0 and batch.n_pillars > 0:
                f_pts = self.point_net(cloud)
                g_pts, _, _ = fuse_point_features(f_vox, f_pts, self.cfg.encoder.top_k)
                g_mem, _, _ = self.memory.read(f_vox, self.cfg.memory.top_k)
                l_mem = memory_alignment_loss(g_pts, g_mem)
                alignment = mean_alignment_distance(g_pts, g_mem)
                g_head = g_pts if self.cfg.train_head_input == "voxel_point" else g_mem
            else:
                g_head = T.Tensor(np.zeros_like(f_vox.data))
            image = build_fused_image(f_vox, g_head, batch.coords, self.grid)
        else:
            image = scatter_to_image(f_vox, batch.coords, self.grid)

        reg, cls = self.head(self._head_map(image, batch))
        match = match_anchors(self.anchors, boxes,
                              self.cfg.head.pos_iou, self.cfg.head.neg_iou)

        keep = np.flatnonzero(match.labels != -1)
        l_cls = focal_loss_sum(dt.tensor.gather_rows(cls, keep),
                               match.labels[keep].astype(np.float64))
        pos = match.pos_idx
        if pos.size:
            rows = dt.tensor.gather_rows(reg, pos)  # (P, 9)
            anchors7 = self.anchors.vector7()[pos]
            gt7 = np.stack([boxes[g].vector7() for g in match.assigned_gt[pos]])
            target_res, bits = encode_boxes(anchors7, gt7)
            l_reg = regression_loss_sum(dt.tensor.slice_axis(rows, 1, 0, 7), target_res)
            l_dir = direction_loss_sum(dt.tensor.slice_axis(rows, 1, 7, 9), bits)
        else:
            l_reg = T.Tensor(0.0)
            l_dir = T.Tensor(0.0)

        total = combine_losses(l_reg, l_dir, l_cls, l_mem, match.n_pos,
                               weights=self.cfg.head.loss_weights())
        return TrainStepLosses(total=total, reg=l_reg.item(), dir=l_dir.item(),
                               cls=l_cls.item(), mem=l_mem.item(),
                               n_pos=match.n_pos, alignment=alignment)

    # -- inference -------------------------------------------------------------

    def forward_infer(self, batch: PillarBatch) -> list[Detection]:
        """Detections from pillars alone: the bank stands in for the points."""
        with dt.no_grad():
            if batch.n_pillars == 0:
                return []
            f_vox = self.pillar_features(batch)
            if self.with_points:
                g_mem, _, _ = self.memory.read(f_vox, self.cfg.memory.top_k)
                image = build_fused_image(f_vox, g_mem, batch.coords, self.grid)
            else:
                image = scatter_to_image(f_vox, batch.coords, self.grid)
            fused = self._head_map(image, batch)
            return self.head.predict(fused, self.anchors,
                                     score_thr=self.cfg.head.score_thr,
                                     nms_iou=self.cfg.head.nms_iou)

    # -- state I/O ---------------------------------------------------------------

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        """All parameters and buffers as (name, array), checkpoint order."""
        out = [(p.name, p.data) for p in self.parameters()]
        out += [(b.name, b.value) for b in self.buffers()]
        names = [n for n, _ in out]
        if len(set(names)) != len(names):
            raise ValueError("duplicate names in model state")
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = {p.name: p for p in self.parameters()}
        buffers = {b.name: b for b in self.buffers()}
        expected = set(params) | set(buffers)
        missing = sorted(expected - set(arrays))
        extra = sorted(set(arrays) - expected)
        if missing or extra:
            raise CheckpointError(f"model/checkpoint mismatch: missing {missing}, "
                                  f"unexpected {extra}")
        for name, arr in arrays.items():
            target = params[name].data if name in params else buffers[name].value
            if tuple(arr.shape) != tuple(target.shape):
                raise CheckpointError(f"{name}: checkpoint shape {arr.shape} != "
                                      f"model shape {target.shape}")
            if name in params:
                params[name].data = np.array(arr)
            else:
                buffers[name].value = np.array(arr)
