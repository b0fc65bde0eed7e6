"""Readers and writers for the KITTI on-disk formats.

Point clouds are packed little-endian float32 quadruples (x, y, z,
reflectance) and are widened to float64 on read. Labels live in the camera
frame and are converted to LiDAR-frame boxes using a calibration file's
rectification matrix R0 and the velodyne-to-camera transform Tr.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ParseError
from ..geometry import normalize_angle
from .types import GroundTruthBox, Scene

_POINT_BYTES = 16  # four little-endian float32 values


def read_velodyne(path) -> np.ndarray:
    """Read a packed point cloud file into a (P, 4) float64 array."""
    raw = Path(path).read_bytes()
    if len(raw) % _POINT_BYTES != 0:
        raise ParseError(f"{path}: size {len(raw)} is not a multiple of "
                         f"{_POINT_BYTES} bytes per point (offset {len(raw) - len(raw) % _POINT_BYTES})")
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    return pts.astype(np.float64)


def write_velodyne(path, points: np.ndarray) -> None:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    Path(path).write_bytes(points.astype("<f4").tobytes())


@dataclass
class Calib:
    """R0: 3x3 rectification, Tr: 3x4 velodyne-to-camera transform."""

    r0: np.ndarray
    tr: np.ndarray

    def __post_init__(self):
        self.r0 = np.asarray(self.r0, dtype=np.float64).reshape(3, 3)
        self.tr = np.asarray(self.tr, dtype=np.float64).reshape(3, 4)

    @classmethod
    def identity(cls) -> "Calib":
        return cls(np.eye(3), np.hstack([np.eye(3), np.zeros((3, 1))]))

    def cam_from_lidar(self) -> np.ndarray:
        """4x4 homogeneous transform taking LiDAR points into the rectified
        camera frame."""
        tr4 = np.eye(4)
        tr4[:3, :] = self.tr
        r04 = np.eye(4)
        r04[:3, :3] = self.r0
        return r04 @ tr4

    def lidar_from_cam(self) -> np.ndarray:
        return np.linalg.inv(self.cam_from_lidar())


def read_calib(path) -> Calib:
    r0 = None
    tr = None
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        key, _, rest = line.partition(":")
        values = rest.split()
        if key in ("R0_rect", "R_rect"):
            if len(values) != 9:
                raise ParseError(f"{path}:{lineno}: R0_rect needs 9 values, got {len(values)}")
            r0 = np.array([float(v) for v in values]).reshape(3, 3)
        elif key in ("Tr_velo_to_cam", "Tr_velo_cam"):
            if len(values) != 12:
                raise ParseError(f"{path}:{lineno}: Tr_velo_to_cam needs 12 values, got {len(values)}")
            tr = np.array([float(v) for v in values]).reshape(3, 4)
    if r0 is None or tr is None:
        raise ParseError(f"{path}: missing R0_rect or Tr_velo_to_cam")
    return Calib(r0, tr)


def write_calib(path, calib: Calib) -> None:
    lines = [
        "R0_rect: " + " ".join(f"{v:.12e}" for v in calib.r0.reshape(-1)),
        "Tr_velo_to_cam: " + " ".join(f"{v:.12e}" for v in calib.tr.reshape(-1)),
    ]
    Path(path).write_text("\n".join(lines) + "\n")


_LABEL_FIELDS = 15


def _parse_label_line(line: str, path, lineno: int):
    fields = line.split()
    if len(fields) != _LABEL_FIELDS:
        raise ParseError(f"{path}:{lineno}: expected {_LABEL_FIELDS} fields, got {len(fields)}")
    try:
        numbers = [float(v) for v in fields[1:]]
    except ValueError as exc:
        raise ParseError(f"{path}:{lineno}: non-numeric field: {exc}") from exc
    return fields[0], numbers


def read_labels(path, calib: Calib) -> list[GroundTruthBox]:
    """Parse a label file into LiDAR-frame boxes. DontCare rows are skipped.

    Label rows store (h, w, l), the bottom-face center in camera coordinates,
    and the yaw about the camera's vertical axis; the returned boxes use the
    volumetric center, (w, l, h) ordering, and LiDAR yaw about +z.
    """
    boxes = []
    lidar_from_cam = calib.lidar_from_cam()
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        label, vals = _parse_label_line(line, path, lineno)
        if label == "DontCare":
            continue
        h, w, l = vals[7], vals[8], vals[9]
        cam_bottom = np.array([vals[10], vals[11], vals[12], 1.0])
        ry = vals[13]
        lidar_bottom = lidar_from_cam @ cam_bottom
        center = lidar_bottom[:3] + np.array([0.0, 0.0, 0.5 * h])
        heading = float(normalize_angle(-ry - 0.5 * math.pi))
        boxes.append(GroundTruthBox(center=center, size=np.array([w, l, h]),
                                    heading=heading, label=label))
    return boxes


def write_labels(path, boxes: list[GroundTruthBox], calib: Calib) -> None:
    """Inverse of read_labels. 2D quantities are out of scope, so alpha is the
    sentinel -10 and the image bbox is a fixed placeholder."""
    cam_from_lidar = calib.cam_from_lidar()
    lines = []
    for box in boxes:
        w, l, h = box.size
        bottom = box.center - np.array([0.0, 0.0, 0.5 * h])
        cam = cam_from_lidar @ np.append(bottom, 1.0)
        ry = float(normalize_angle(-box.heading - 0.5 * math.pi))
        lines.append(" ".join([
            box.label, "0.00", "0", "-10",
            "0.00", "0.00", "50.00", "50.00",
            f"{h:.6f}", f"{w:.6f}", f"{l:.6f}",
            f"{cam[0]:.6f}", f"{cam[1]:.6f}", f"{cam[2]:.6f}",
            f"{ry:.6f}",
        ]))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_scene(data_dir, scene_id: str) -> Scene:
    """Load one KITTI-layout scene: velodyne/, label_2/, calib/ subdirs."""
    data_dir = Path(data_dir)
    points = read_velodyne(data_dir / "velodyne" / f"{scene_id}.bin")
    calib = read_calib(data_dir / "calib" / f"{scene_id}.txt")
    label_path = data_dir / "label_2" / f"{scene_id}.txt"
    boxes = read_labels(label_path, calib) if label_path.exists() else []
    return Scene(scene_id=scene_id, points=points, boxes=boxes)


def list_scene_ids(data_dir) -> list[str]:
    velo = Path(data_dir) / "velodyne"
    if not velo.is_dir():
        raise ParseError(f"{velo} is not a directory")
    return sorted(p.stem for p in velo.glob("*.bin"))
