"""Training-time scene augmentation.

Order is fixed: ground-truth paste, random flip over the x axis, global
rotation about +z, global scale. Every transform is applied consistently to
points and boxes, so a point inside a box stays inside it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..geometry import normalize_angle, points_in_box_mask, rotated_iou_bev
from .types import GroundTruthBox, Scene


@dataclass
class AugmentConfig:
    paste_max: int = 0          # how many bank samples to try pasting
    flip_prob: float = 0.5
    rotation_range: tuple = (-math.pi / 4.0, math.pi / 4.0)
    scale_range: tuple = (0.95, 1.05)

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(paste_max=0, flip_prob=0.0, rotation_range=(0.0, 0.0),
                   scale_range=(1.0, 1.0))


@dataclass
class BankSample:
    """One cut-out object: its box and the points on it."""

    box: GroundTruthBox
    points: np.ndarray  # (P, 4)


def build_sample_bank(scenes: list[Scene], dilation: float = 0.05) -> list[BankSample]:
    """Collect every annotated object and its points from a scene list."""
    bank = []
    for scene in scenes:
        for box in scene.boxes:
            mask = points_in_box_mask(scene.points[:, :3], box.center, box.size,
                                      box.heading, dilation=dilation)
            if mask.any():
                bank.append(BankSample(box=box.copy(), points=scene.points[mask].copy()))
    return bank


def _paste(scene: Scene, bank: list[BankSample], paste_max: int,
           rng: np.random.Generator) -> Scene:
    points = [scene.points]
    boxes = list(scene.boxes)
    for _ in range(paste_max):
        sample = bank[int(rng.integers(len(bank)))]
        if any(rotated_iou_bev(sample.box.bev5(), b.bev5()) > 0.0 for b in boxes):
            continue
        boxes.append(sample.box.copy())
        points.append(sample.points.copy())
    return Scene(scene.scene_id, np.vstack(points), boxes)


def augment_scene(scene: Scene, cfg: AugmentConfig, rng: np.random.Generator,
                  bank: list[BankSample] | None = None) -> Scene:
    """Return an augmented copy; the input scene is never modified."""
    out = scene.copy()
    if cfg.paste_max > 0 and bank:
        out = _paste(out, bank, cfg.paste_max, rng)

    if rng.random() < cfg.flip_prob:
        out.points[:, 1] *= -1.0
        for box in out.boxes:
            box.center[1] *= -1.0
            box.heading = float(normalize_angle(-box.heading))

    phi = rng.uniform(*cfg.rotation_range)
    if phi != 0.0:
        c, s = math.cos(phi), math.sin(phi)
        x = out.points[:, 0].copy()
        y = out.points[:, 1].copy()
        out.points[:, 0] = c * x - s * y
        out.points[:, 1] = s * x + c * y
        for box in out.boxes:
            bx, by = box.center[0], box.center[1]
            box.center[0] = c * bx - s * by
            box.center[1] = s * bx + c * by
            box.heading = float(normalize_angle(box.heading + phi))

    scale = rng.uniform(*cfg.scale_range)
    if scale != 1.0:
        out.points[:, :3] *= scale
        for box in out.boxes:
            box.center *= scale
            box.size *= scale
    return out
