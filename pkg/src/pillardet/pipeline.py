"""Training, inference, and evaluation drivers tying the modules together.

Every entry point here is deterministic in its config seed: the seed is split
into independent streams (model init, augmentation, voxel subsampling, batch
shuffling) so adding or removing one consumer never shifts the others.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import difftensor as dt
from .config import RunConfig
from .difftensor.checkpoint import read_checkpoint, write_checkpoint
from .difftensor.gradcheck import GradReport, run_all
from .difftensor.optim import Adam, cosine_lr
from .encoder import COUNTERS, POINT_FUSION, POINT_STREAM_FORWARD
from .errors import CheckpointError, ConfigError, NumericFailure, ParseError
from .evaluation import EvalReport, evaluate_scenes
from .head import Detection
from .model import Detector
from .pillars import voxelize
from .scene_io.augment import AugmentConfig, augment_scene, build_sample_bank
from .scene_io.kitti import (Calib, list_scene_ids, load_scene, write_calib,
                             write_labels, write_velodyne)
from .scene_io.synthetic import SceneSpec, generate_scene
from .scene_io.types import Scene

log = logging.getLogger("pillardet")

METRICS_HEADER = "# pillardet-metrics v1"
EVAL_SCHEMA = "pillardet-eval v1"


# -- data ------------------------------------------------------------------


def make_scenes(cfg: RunConfig) -> list[Scene]:
    """Materialize the configured dataset as a list of scenes."""
    if cfg.data.kind == "synthetic":
        return [generate_scene(SceneSpec(seed=cfg.data.scene_seed + i,
                                         n_boxes=cfg.data.n_boxes),
                               scene_id=f"{i:06d}")
                for i in range(cfg.data.n_scenes)]
    ids = list_scene_ids(cfg.data.path)
    return [load_scene(cfg.data.path, sid) for sid in ids]


def _seed_streams(seed: int) -> tuple[np.random.Generator, ...]:
    """(init, augment, voxelize, shuffle) generators, independent per seed."""
    children = np.random.SeedSequence(seed).spawn(4)
    return tuple(np.random.default_rng(c) for c in children)


def build_model(cfg: RunConfig) -> Detector:
    """The detector exactly as run_train would initialize it."""
    init_rng, _, _, _ = _seed_streams(cfg.seed)
    return Detector(cfg, init_rng)


# -- training ----------------------------------------------------------------


@dataclass
class TrainResult:
    out_dir: Path
    final_checkpoint: Path
    metrics_path: Path
    total_steps: int
    final_loss: float


def _metrics_line(step: int, lr: float, total: float, reg: float, dir_: float,
                  cls: float, mem: float, n_pos: int, align: float) -> str:
    return (f"step={step} lr={lr:.8e} total={total:.10e} reg={reg:.10e} "
            f"dir={dir_:.10e} cls={cls:.10e} mem={mem:.10e} "
            f"n_pos={n_pos} align={align:.10e}")


def read_metrics(path) -> list[dict[str, float]]:
    """Parse a metrics log back into one dict per step record."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != METRICS_HEADER:
        raise ParseError(f"{path}: missing metrics header {METRICS_HEADER!r}")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        rec: dict[str, float] = {}
        for token in line.split():
            key, sep, val = token.partition("=")
            if not sep:
                raise ParseError(f"{path}:{lineno}: bad token {token!r}")
            try:
                rec[key] = float(val)
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: bad value {token!r}") from exc
        records.append(rec)
    return records


def run_train(cfg: RunConfig, out_dir) -> TrainResult:
    """Train per config, writing metrics and checkpoints under out_dir.

    Raises ConfigError before any training work when the config cannot run:
    backbone-incompatible grid, or an empty dataset.
    """
    cfg.validate()
    h, w = cfg.grid.spec().shape_hw
    if h % 8 or w % 8:
        raise ConfigError(f"grid extents ({h}, {w}) must be divisible by 8 "
                          "for the multi-scale backbone")
    scenes = make_scenes(cfg)
    if not scenes:
        raise ConfigError("training requires at least one scene")

    init_rng, aug_rng, vox_rng, shuffle_rng = _seed_streams(cfg.seed)
    model = Detector(cfg, init_rng)
    opt = Adam(model.parameters(), lr=cfg.optim.lr,
               weight_decay=cfg.optim.weight_decay)

    aug_cfg = AugmentConfig() if cfg.augment else None
    bank = build_sample_bank(scenes) if cfg.augment else None

    n = len(scenes)
    steps_per_epoch = math.ceil(n / cfg.optim.batch_size)
    total_steps = cfg.max_steps if cfg.max_steps else cfg.optim.epochs * steps_per_epoch

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.txt"
    grid = model.grid
    order = np.empty(0, dtype=np.int64)
    pos = 0
    final_loss = math.nan

    with open(metrics_path, "w", encoding="utf-8") as metrics:
        metrics.write(METRICS_HEADER + "\n")
        for step in range(1, total_steps + 1):
            if pos >= order.size:
                order = shuffle_rng.permutation(n)
                pos = 0
            batch_ids = order[pos:pos + cfg.optim.batch_size]
            pos += cfg.optim.batch_size

            total = None
            reg = dir_ = cls = mem = align = 0.0
            n_pos = 0
            for i in batch_ids:
                scene = scenes[i]
                if aug_cfg is not None:
                    scene = augment_scene(scene, aug_cfg, aug_rng, bank)
                batch = voxelize(scene.points, grid, cfg.grid.max_points_per_pillar,
                                 cfg.grid.max_pillars, rng=vox_rng)
                points = scene.points if cfg.point_stream_input == "raw" else None
                losses = model.forward_train(batch, scene.boxes, points=points)
                total = losses.total if total is None else dt.tensor.add(total, losses.total)
                reg += losses.reg
                dir_ += losses.dir
                cls += losses.cls
                mem += losses.mem
                align += losses.alignment
                n_pos += losses.n_pos
            k = len(batch_ids)
            loss = dt.tensor.div(total, float(k))
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise NumericFailure(f"non-finite training loss at step {step}")

            lr = cosine_lr(step - 1, total_steps, cfg.optim.lr)
            opt.zero_grad()
            loss.backward()
            opt.step(lr=lr)

            metrics.write(_metrics_line(step, lr, loss_val, reg / k, dir_ / k,
                                        cls / k, mem / k, n_pos, align / k) + "\n")
            final_loss = loss_val

            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                _save(model, opt, cfg, out_dir / f"step{step:06d}.ckpt")
            if step == 1 or step % 50 == 0 or step == total_steps:
                log.info("step %d/%d loss %.6f lr %.2e", step, total_steps, loss_val, lr)

    final = out_dir / "final.ckpt"
    _save(model, opt, cfg, final)
    return TrainResult(out_dir=out_dir, final_checkpoint=final,
                       metrics_path=metrics_path, total_steps=total_steps,
                       final_loss=final_loss)


def _save(model: Detector, opt: Adam, cfg: RunConfig, path: Path) -> None:
    write_checkpoint(path, model.named_arrays(), opt_state=opt.state_arrays(),
                     config_json=cfg.to_json())


# -- inference -----------------------------------------------------------------


def load_detector(path) -> tuple[Detector, RunConfig]:
    """Rebuild a detector in eval mode from a checkpoint."""
    params, _, config_json = read_checkpoint(path)
    if config_json is None:
        raise CheckpointError(f"{path}: checkpoint carries no config")
    cfg = RunConfig.from_json(config_json)
    model = Detector(cfg, np.random.default_rng(0))
    model.load_arrays(params)
    model.set_training(False)
    return model, cfg


def infer_scene(model: Detector, cfg: RunConfig, scene: Scene) -> list[Detection]:
    """Detections for one scene; never touches the point stream.

    Voxel subsampling draws from a generator reseeded per call, so the same
    scene always voxelizes the same way regardless of call order.
    """
    COUNTERS.reset()
    batch = voxelize(scene.points, model.grid, cfg.grid.max_points_per_pillar,
                     cfg.grid.max_pillars, rng=np.random.default_rng(cfg.seed))
    detections = model.forward_infer(batch)
    if COUNTERS.get(POINT_STREAM_FORWARD) or COUNTERS.get(POINT_FUSION):
        raise RuntimeError("point stream ops ran during inference")
    for det in detections:
        det.scene_id = scene.scene_id
    return detections


def run_infer(ckpt_path, scene_path) -> list[Detection]:
    """Load a checkpoint and run detection on one velodyne .bin file."""
    from .scene_io.kitti import read_velodyne

    model, cfg = load_detector(ckpt_path)
    scene_path = Path(scene_path)
    scene = Scene(scene_id=scene_path.stem, points=read_velodyne(scene_path))
    return infer_scene(model, cfg, scene)


def run_eval(ckpt_path, data_dir) -> tuple[EvalReport, dict]:
    """Infer every scene under data_dir and score against its labels."""
    model, cfg = load_detector(ckpt_path)
    ids = list_scene_ids(data_dir)
    all_dets: list[list[Detection]] = []
    all_gt = []
    per_scene = []
    for sid in ids:
        scene = load_scene(data_dir, sid)
        dets = infer_scene(model, cfg, scene)
        all_dets.append(dets)
        all_gt.append(scene.boxes)
        per_scene.append({"scene_id": sid, "n_gt": len(scene.boxes),
                          "n_detections": len(dets)})
    report = evaluate_scenes(all_dets, all_gt, iou_thr=cfg.head.eval_iou)
    structured = {
        "schema": EVAL_SCHEMA,
        "ap": report.ap,
        "iou_thr": report.iou_thr,
        "n_scenes": report.n_scenes,
        "n_gt": report.n_gt,
        "n_detections": report.n_detections,
        "per_scene": per_scene,
    }
    return report, structured


# -- diagnostics -----------------------------------------------------------------


def run_gradcheck(cfg: RunConfig) -> list[GradReport]:
    from . import gradchecks  # noqa: F401  checks register on import

    return run_all(seed=cfg.seed)


def alignment_stats(model: Detector, cfg: RunConfig, scenes: list[Scene]) -> float:
    """Mean per-pillar distance between point and memory readouts.

    Scenes without pillars or points contribute nothing. Voxelization is
    reseeded per scene so the measurement is stable across calls.
    """
    dists = []
    with dt.no_grad():
        for scene in scenes:
            batch = voxelize(scene.points, model.grid,
                             cfg.grid.max_points_per_pillar, cfg.grid.max_pillars,
                             rng=np.random.default_rng(cfg.seed))
            if batch.n_pillars == 0:
                continue
            points = scene.points if cfg.point_stream_input == "raw" else None
            losses = model.forward_train(batch, scene.boxes, points=points)
            dists.append(losses.alignment)
    return float(np.mean(dists)) if dists else 0.0


# -- synthetic dataset generation -------------------------------------------------


def run_synth_gen(spec_path, out_dir) -> list[str]:
    """Write a KITTI-layout synthetic dataset described by a JSON spec.

    The spec holds n_scenes, base_seed, and any SceneSpec field overrides;
    unknown keys are rejected. Returns the generated scene ids.
    """
    spec_path = Path(spec_path)
    try:
        raw = json.loads(spec_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ParseError(f"{spec_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{spec_path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{spec_path}: spec must be a JSON object")

    n_scenes = raw.pop("n_scenes", 1)
    base_seed = raw.pop("base_seed", 0)
    if not isinstance(n_scenes, int) or n_scenes < 0:
        raise ConfigError(f"n_scenes must be a non-negative int, got {n_scenes!r}")
    if not isinstance(base_seed, int):
        raise ConfigError(f"base_seed must be an int, got {base_seed!r}")
    allowed = set(SceneSpec.__dataclass_fields__) - {"seed"}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown scene spec keys: {sorted(unknown)}")
    overrides = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}

    out_dir = Path(out_dir)
    for sub in ("velodyne", "label_2", "calib"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    calib = Calib.identity()
    ids = []
    for i in range(n_scenes):
        sid = f"{i:06d}"
        spec = SceneSpec(seed=base_seed + i, **overrides)
        scene = generate_scene(spec, scene_id=sid)
        write_velodyne(out_dir / "velodyne" / f"{sid}.bin", scene.points)
        write_labels(out_dir / "label_2" / f"{sid}.txt", scene.boxes, calib)
        write_calib(out_dir / "calib" / f"{sid}.txt", calib)
        ids.append(sid)
    return ids
