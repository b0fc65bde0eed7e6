"""Run configuration: named profiles, JSON round trip, startup validation.

A config file is a JSON object of overrides on top of a named profile
(`"profile": "desk"` by default). Every run serializes its full resolved
config into the checkpoint, so a checkpoint alone reconstructs the model.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .pillars import GridSpec

VARIANTS = ("voxel", "voxel_point", "full")
TRAIN_HEAD_INPUTS = ("voxel_point", "voxel_memory")
POINT_STREAM_INPUTS = ("voxel_retained", "raw")
DATA_KINDS = ("synthetic", "kitti")


@dataclass
class GridConfig:
    """Detection range, pillar size, and the voxelizer's retention caps."""

    x_range: tuple = (0.0, 5.12)
    y_range: tuple = (-2.56, 2.56)
    z_range: tuple = (-3.0, 1.0)
    voxel_size: tuple = (0.16, 0.16, 4.0)
    max_points_per_pillar: int = 16
    max_pillars: int = 256

    def spec(self) -> GridSpec:
        return GridSpec(x_range=self.x_range, y_range=self.y_range,
                        z_range=self.z_range, voxel_size=self.voxel_size)


@dataclass
class EncoderConfig:
    channels: int = 16      # C, width of both streams
    top_k: int = 8          # K for pillar-to-point fusion
    sa_radii: tuple = (0.8, 1.6)
    sa_max_samples: int = 16


@dataclass
class MemoryConfig:
    items: int = 128  # T
    top_k: int = 8    # K for pillar-to-memory reads


@dataclass
class BackboneConfig:
    depth: int = 2  # conv units per downsampling block


@dataclass
class HeadConfig:
    """Assignment/score thresholds and the loss mixing weights."""

    pos_iou: float = 0.6
    neg_iou: float = 0.45
    score_thr: float = 0.3
    nms_iou: float = 0.1
    eval_iou: float = 0.5
    reg_weight: float = 2.0
    dir_weight: float = 0.2
    cls_weight: float = 1.0
    mem_weight: float = 1.0

    def loss_weights(self) -> dict:
        return {"reg": self.reg_weight, "dir": self.dir_weight,
                "cls": self.cls_weight, "mem": self.mem_weight}


@dataclass
class OptimConfig:
    lr: float = 3e-3
    weight_decay: float = 1e-2
    epochs: int = 8
    batch_size: int = 2


@dataclass
class DataConfig:
    """Where scenes come from: generated on the fly or a KITTI-layout dir."""

    kind: str = "synthetic"
    path: str = ""          # kitti only
    n_scenes: int = 20      # synthetic only
    scene_seed: int = 0     # first scene seed; scene i uses scene_seed + i
    n_boxes: int = 1


@dataclass
class RunConfig:
    profile: str = "desk"
    variant: str = "full"   # voxel | voxel_point | full
    grid: GridConfig = field(default_factory=GridConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    augment: bool = False
    train_head_input: str = "voxel_point"       # which fused image feeds the head loss
    point_stream_input: str = "voxel_retained"  # retained pillar points or the raw cloud
    max_steps: int = 0          # 0 = run the full epoch schedule
    checkpoint_every: int = 0   # steps between periodic checkpoints; 0 = final only

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError(f"config root must be an object, got {type(data).__name__}")
        profile = data.get("profile", "desk")
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        cfg = PROFILES[profile]()
        _apply_overrides(cfg, data, "")
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON at line {exc.lineno}, "
                              f"column {exc.colno}: {exc.msg}") from exc
        return cls.from_dict(data)

    # -- validation --------------------------------------------------------

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant {self.variant!r} not in {VARIANTS}")
        if self.train_head_input not in TRAIN_HEAD_INPUTS:
            raise ConfigError(f"train_head_input {self.train_head_input!r} "
                              f"not in {TRAIN_HEAD_INPUTS}")
        if self.point_stream_input not in POINT_STREAM_INPUTS:
            raise ConfigError(f"point_stream_input {self.point_stream_input!r} "
                              f"not in {POINT_STREAM_INPUTS}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.max_steps < 0 or self.checkpoint_every < 0:
            raise ConfigError("max_steps and checkpoint_every must be >= 0")

        self.grid.spec()  # range/voxel invariants live in GridSpec
        if self.grid.max_points_per_pillar < 1 or self.grid.max_pillars < 1:
            raise ConfigError("retention caps must be >= 1")

        e = self.encoder
        if e.channels < 1:
            raise ConfigError("encoder channels must be >= 1")
        if e.top_k < 1:
            raise ConfigError("encoder top_k must be >= 1")
        if len(e.sa_radii) != 2 or any(r <= 0 for r in e.sa_radii):
            raise ConfigError(f"sa_radii needs two positive radii, got {e.sa_radii}")
        if e.sa_max_samples < 1:
            raise ConfigError("sa_max_samples must be >= 1")

        m = self.memory
        if m.items < 1:
            raise ConfigError("memory needs at least one item")
        if not 1 <= m.top_k <= m.items:
            raise ConfigError(f"memory top_k {m.top_k} outside [1, {m.items}]")

        if self.backbone.depth < 1:
            raise ConfigError("backbone depth must be >= 1")

        h = self.head
        if not 0.0 < h.neg_iou <= h.pos_iou < 1.0:
            raise ConfigError(f"need 0 < neg_iou <= pos_iou < 1, got "
                              f"({h.pos_iou}, {h.neg_iou})")
        if not 0.0 < h.score_thr < 1.0:
            raise ConfigError(f"score_thr {h.score_thr} outside (0, 1)")
        if not 0.0 <= h.nms_iou < 1.0:
            raise ConfigError(f"nms_iou {h.nms_iou} outside [0, 1)")
        if not 0.0 < h.eval_iou < 1.0:
            raise ConfigError(f"eval_iou {h.eval_iou} outside (0, 1)")
        for name, w in h.loss_weights().items():
            if w < 0:
                raise ConfigError(f"loss weight {name} must be >= 0, got {w}")

        o = self.optim
        if o.lr <= 0 or o.weight_decay < 0:
            raise ConfigError("lr must be positive and weight_decay non-negative")
        if o.epochs < 1 or o.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")

        d = self.data
        if d.kind not in DATA_KINDS:
            raise ConfigError(f"data kind {d.kind!r} not in {DATA_KINDS}")
        if d.kind == "kitti" and not d.path:
            raise ConfigError("kitti data source needs a directory path")
        if d.kind == "synthetic" and (d.n_scenes < 0 or d.n_boxes < 0):
            raise ConfigError("n_scenes and n_boxes must be >= 0")


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _apply_overrides(obj, data: dict, path: str) -> None:
    """Recursively set dataclass fields from a dict, rejecting unknown keys."""
    names = {f.name for f in dataclasses.fields(obj)}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"unknown config key {path}{key!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path}{key!r} must be an object")
            _apply_overrides(current, value, f"{path}{key}.")
        else:
            setattr(obj, key, _tuplify(value))


def desk_profile() -> RunConfig:
    """The scaled-down profile every test and experiment runs on."""
    return RunConfig()


def full_profile() -> RunConfig:
    """The full-scale profile, kept for documentation parity.

    Its 80 m lateral extent yields 500 rows, which the backbone rejects
    (extents must divide by 8), and its data source needs a KITTI directory;
    training at this scale is outside what this package is sized for.
    """
    return RunConfig(
        profile="full",
        grid=GridConfig(x_range=(0.0, 70.4), y_range=(-40.0, 40.0),
                        z_range=(-3.0, 1.0), voxel_size=(0.16, 0.16, 4.0),
                        max_points_per_pillar=32, max_pillars=12000),
        encoder=EncoderConfig(channels=64, top_k=20, sa_radii=(0.8, 1.6),
                              sa_max_samples=32),
        memory=MemoryConfig(items=2000, top_k=20),
        optim=OptimConfig(lr=3e-3, weight_decay=1e-2, epochs=100, batch_size=8),
        data=DataConfig(kind="kitti", path=""),
        augment=True,
    )


PROFILES = {"desk": desk_profile, "full": full_profile}


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        return RunConfig.from_json(text)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
