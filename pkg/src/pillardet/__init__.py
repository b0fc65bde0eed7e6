"""Desk-scale single-stage 3D LiDAR object detection with a trainable feature memory."""

from .config import RunConfig, desk_profile, full_profile, load_config
from .model import Detector
from .pipeline import (run_eval, run_gradcheck, run_infer, run_synth_gen,
                       run_train)

__version__ = "0.1.0"

__all__ = [
    "Detector",
    "RunConfig",
    "desk_profile",
    "full_profile",
    "load_config",
    "run_eval",
    "run_gradcheck",
    "run_infer",
    "run_synth_gen",
    "run_train",
    "__version__",
]
