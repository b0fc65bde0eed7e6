"""Deterministic synthetic LiDAR scenes.

A scene is a flat ground plane plus a handful of non-overlapping box targets
whose surfaces are sampled at a density that decays with distance from the
sensor, mimicking how a spinning scanner sees less of what is far away. All
randomness comes from the spec's own seed, so a spec value is a scene.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, DataError
from ..geometry import normalize_angle, points_in_box_mask, rotated_iou_bev
from .types import GroundTruthBox, Scene

# outer bounds any spec must live inside (full-scale scene dimensions)
SCENE_X = (0.0, 70.4)
SCENE_Y = (-40.0, 40.0)
SCENE_Z = (-3.0, 1.0)


@dataclass
class SceneSpec:
    """Recipe for one synthetic scene; equal specs give identical scenes."""

    seed: int = 0
    n_boxes: int = 1
    x_range: tuple = (0.4, 5.0)
    y_range: tuple = (-2.4, 2.4)
    ground_z: float = -1.4
    box_size_mean: tuple = (1.6, 3.9, 1.5)  # (w, l, h)
    box_size_jitter: float = 0.05
    heading_range: tuple = (-math.pi, math.pi)
    surface_density: float = 60.0  # points per square meter of footprint
    ground_density: float = 12.0
    falloff_distance: float = 10.0  # full density within this range
    ground_noise: float = 0.02
    max_place_attempts: int = 100

    def validate(self) -> None:
        if not (SCENE_X[0] <= self.x_range[0] < self.x_range[1] <= SCENE_X[1]):
            raise ConfigError(f"x_range {self.x_range} outside scene bounds {SCENE_X}")
        if not (SCENE_Y[0] <= self.y_range[0] < self.y_range[1] <= SCENE_Y[1]):
            raise ConfigError(f"y_range {self.y_range} outside scene bounds {SCENE_Y}")
        if not (SCENE_Z[0] <= self.ground_z <= SCENE_Z[1]):
            raise ConfigError(f"ground_z {self.ground_z} outside scene bounds {SCENE_Z}")
        if self.n_boxes < 0 or self.surface_density <= 0 or self.ground_density < 0:
            raise ConfigError("n_boxes must be >= 0 and densities positive")


def distance_attenuation(dist: float, falloff: float) -> float:
    """Inverse-square density decay beyond the falloff distance, 1 inside it."""
    d = max(float(dist), 1e-9)
    return min(1.0, (falloff / d) ** 2)


def expected_box_surface_points(spec: SceneSpec, box: GroundTruthBox) -> float:
    """Analytic point-count target for a box: density x footprint x decay."""
    dist = math.hypot(box.center[0], box.center[1])
    w, l, _ = box.size
    return spec.surface_density * w * l * distance_attenuation(dist, spec.falloff_distance)


def _place_boxes(spec: SceneSpec, rng: np.random.Generator) -> list[GroundTruthBox]:
    boxes: list[GroundTruthBox] = []
    for i in range(spec.n_boxes):
        placed = False
        for _ in range(spec.max_place_attempts):
            jitter = 1.0 + spec.box_size_jitter * rng.uniform(-1.0, 1.0, size=3)
            w, l, h = np.array(spec.box_size_mean) * jitter
            margin = 0.5 * math.hypot(w, l)
            lo_x, hi_x = spec.x_range[0] + margin, spec.x_range[1] - margin
            lo_y, hi_y = spec.y_range[0] + margin, spec.y_range[1] - margin
            if lo_x >= hi_x or lo_y >= hi_y:
                continue
            cx = rng.uniform(lo_x, hi_x)
            cy = rng.uniform(lo_y, hi_y)
            heading = float(normalize_angle(rng.uniform(*spec.heading_range)))
            cand = GroundTruthBox(center=np.array([cx, cy, spec.ground_z + 0.5 * h]),
                                  size=np.array([w, l, h]), heading=heading)
            if all(rotated_iou_bev(cand.bev5(), b.bev5()) == 0.0 for b in boxes):
                boxes.append(cand)
                placed = True
                break
        if not placed:
            raise DataError(f"could not place box {i + 1}/{spec.n_boxes} without overlap "
                            f"in ranges x={spec.x_range}, y={spec.y_range}")
    return boxes


# faces of a unit box in local coords: (axis fixed, sign) for 4 sides + top
_FACES = [("y", 1.0), ("y", -1.0), ("x", 1.0), ("x", -1.0), ("z", 1.0)]


def _sample_box_surface(box: GroundTruthBox, count: int, rng: np.random.Generator) -> np.ndarray:
    w, l, h = box.size
    areas = np.array([l * h, l * h, w * h, w * h, w * l])
    face_idx = rng.choice(len(_FACES), size=count, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=count)
    v = rng.uniform(-0.5, 0.5, size=count)
    local = np.empty((count, 3))
    for k, (axis, sign) in enumerate(_FACES):
        sel = face_idx == k
        if axis == "y":
            local[sel] = np.column_stack([u[sel] * l, np.full(sel.sum(), sign * 0.5 * w), v[sel] * h])
        elif axis == "x":
            local[sel] = np.column_stack([np.full(sel.sum(), sign * 0.5 * l), u[sel] * w, v[sel] * h])
        else:
            local[sel] = np.column_stack([u[sel] * l, v[sel] * w, np.full(sel.sum(), sign * 0.5 * h)])
    c, s = math.cos(box.heading), math.sin(box.heading)
    world_x = c * local[:, 0] - s * local[:, 1] + box.center[0]
    world_y = s * local[:, 0] + c * local[:, 1] + box.center[1]
    world_z = local[:, 2] + box.center[2]
    reflect = rng.uniform(0.1, 0.9, size=count)
    return np.column_stack([world_x, world_y, world_z, reflect])


def _sample_ground(spec: SceneSpec, boxes: list[GroundTruthBox],
                   rng: np.random.Generator) -> np.ndarray:
    area = (spec.x_range[1] - spec.x_range[0]) * (spec.y_range[1] - spec.y_range[0])
    n_cand = int(round(spec.ground_density * area))
    if n_cand == 0:
        return np.zeros((0, 4))
    x = rng.uniform(*spec.x_range, size=n_cand)
    y = rng.uniform(*spec.y_range, size=n_cand)
    keep_p = np.minimum(1.0, (spec.falloff_distance / np.maximum(np.hypot(x, y), 1e-9)) ** 2)
    keep = rng.random(n_cand) < keep_p
    x, y = x[keep], y[keep]
    z = spec.ground_z + rng.normal(0.0, spec.ground_noise, size=x.size)
    pts = np.column_stack([x, y, z, rng.uniform(0.1, 0.9, size=x.size)])
    # carve ground out of box footprints so box points are unambiguous
    for box in boxes:
        inside = points_in_box_mask(pts[:, :3], box.center,
                                    (box.size[0], box.size[1], 100.0), box.heading,
                                    dilation=0.25)
        pts = pts[~inside]
    return pts


def generate_scene(spec: SceneSpec, scene_id: str | None = None) -> Scene:
    """Generate one scene deterministically from its spec."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    boxes = _place_boxes(spec, rng)
    chunks = []
    for box in boxes:
        n = max(1, int(round(expected_box_surface_points(spec, box))))
        chunks.append(_sample_box_surface(box, n, rng))
    chunks.append(_sample_ground(spec, boxes, rng))
    points = np.vstack(chunks) if chunks else np.zeros((0, 4))
    return Scene(scene_id=scene_id or f"synthetic-{spec.seed}", points=points, boxes=boxes)
