"""Scene-level data types shared by parsers, generators, and the trainer."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..geometry import normalize_angle


@dataclass
class GroundTruthBox:
    """An oriented 3D box: center (x, y, z), size (w, l, h), heading about +z.

    `tag` carries any difficulty annotation through untouched; nothing in the
    pipeline interprets it.
    """

    center: np.ndarray
    size: np.ndarray
    heading: float
    label: str = "Car"
    tag: str = ""

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)
        if np.any(self.size <= 0):
            raise ValueError(f"box size must be positive, got {self.size}")
        self.heading = float(normalize_angle(self.heading))

    def vector7(self) -> np.ndarray:
        """(cx, cy, cz, w, l, h, heading)."""
        return np.concatenate([self.center, self.size, [self.heading]])

    def bev5(self) -> np.ndarray:
        """(cx, cy, w, l, heading) for BEV geometry."""
        return np.array([self.center[0], self.center[1],
                         self.size[0], self.size[1], self.heading])

    def copy(self) -> "GroundTruthBox":
        return replace(self, center=self.center.copy(), size=self.size.copy())


@dataclass
class Scene:
    """A point cloud (P, 4: x, y, z, reflectance) plus its annotated boxes."""

    scene_id: str
    points: np.ndarray
    boxes: list[GroundTruthBox] = field(default_factory=list)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)

    def copy(self) -> "Scene":
        return Scene(self.scene_id, self.points.copy(), [b.copy() for b in self.boxes])
