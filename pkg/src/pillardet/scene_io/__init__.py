"""Scene loading: KITTI formats, synthetic generation, augmentation."""

from . import augment, kitti, synthetic
from .augment import AugmentConfig, BankSample, augment_scene, build_sample_bank
from .kitti import Calib, list_scene_ids, load_scene, read_calib, read_labels, read_velodyne
from .synthetic import SceneSpec, expected_box_surface_points, generate_scene
from .types import GroundTruthBox, Scene

__all__ = [
    "AugmentConfig",
    "BankSample",
    "Calib",
    "GroundTruthBox",
    "Scene",
    "SceneSpec",
    "augment",
    "augment_scene",
    "build_sample_bank",
    "expected_box_surface_points",
    "generate_scene",
    "kitti",
    "list_scene_ids",
    "load_scene",
    "read_calib",
    "read_labels",
    "read_velodyne",
    "synthetic",
]
