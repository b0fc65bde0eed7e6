"""Command-line interface.

Exit codes: 0 success, 1 usage, 2 data/config error, 3 numeric failure.
The only environment variable read is PILLARDET_LOG, which sets log
verbosity (debug, info, warning, error); every behavioral switch lives in
the config file.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .config import load_config
from .errors import DataError, NumericFailure
from .pipeline import (run_eval, run_gradcheck, run_infer, run_synth_gen,
                       run_train)

USAGE_EXIT = 1
DATA_EXIT = 2
NUMERIC_EXIT = 3


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; the contract reserves 2 for data errors
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(USAGE_EXIT, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pillardet",
                     description="Desk-scale 3D LiDAR detector pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_train = sub.add_parser("train", help="train a detector from a config file")
    p_train.add_argument("--config", required=True, help="JSON run config")
    p_train.add_argument("--seed", type=int, default=None,
                         help="override the config seed")
    p_train.add_argument("--out", default="run", help="output directory")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--data", required=True, help="KITTI-layout directory")

    p_infer = sub.add_parser("infer", help="detect objects in one scene")
    p_infer.add_argument("--ckpt", required=True)
    p_infer.add_argument("--scene", required=True, help="velodyne .bin file")

    p_grad = sub.add_parser("gradcheck", help="finite-difference check every op")
    p_grad.add_argument("--config", required=True)

    p_synth = sub.add_parser("synth-gen", help="generate a synthetic dataset")
    p_synth.add_argument("--spec", required=True, help="JSON scene spec")
    p_synth.add_argument("--out", required=True, help="dataset directory")

    return parser


def _setup_logging() -> None:
    name = os.environ.get("PILLARDET_LOG", "warning").upper()
    level = getattr(logging, name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.validate()
    result = run_train(cfg, args.out)
    print(f"trained {result.total_steps} steps, final loss {result.final_loss:.6f}")
    print(f"checkpoint: {result.final_checkpoint}")
    print(f"metrics: {result.metrics_path}")
    return 0


def _cmd_eval(args) -> int:
    report, structured = run_eval(args.ckpt, args.data)
    print(report.line())
    print(json.dumps(structured, indent=2, sort_keys=True))
    return 0


def _cmd_infer(args) -> int:
    detections = run_infer(args.ckpt, args.scene)
    print(f"detections={len(detections)}")
    for d in detections:
        coords = " ".join(f"{v:.6f}" for v in d.box7)
        print(f"{d.scene_id} {d.label} score={d.score:.6f} box={coords}")
    return 0


def _cmd_gradcheck(args) -> int:
    cfg = load_config(args.config)
    reports = run_gradcheck(cfg)
    for r in reports:
        print(r.line())
    n_passed = sum(r.passed for r in reports)
    print(f"passed {n_passed}/{len(reports)}")
    return 0 if n_passed == len(reports) else NUMERIC_EXIT


def _cmd_synth_gen(args) -> int:
    ids = run_synth_gen(args.spec, args.out)
    print(f"wrote {len(ids)} scenes to {args.out}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "infer": _cmd_infer,
    "gradcheck": _cmd_gradcheck,
    "synth-gen": _cmd_synth_gen,
}


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_EXIT
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return NUMERIC_EXIT


if __name__ == "__main__":
    sys.exit(main())
