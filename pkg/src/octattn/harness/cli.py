"""Command-line front end: ``octattn {forward,oracle,bench,train-seg,synth}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Optional, Sequence

import numpy as np

from ..voxel import PointFileError, load_points, save_points
from ..semantic import save_boxes
from .config import ConfigError, RunConfig
from .runs import OracleRefusal, run_bench_report, run_forward, run_oracle, run_trainseg
from .synth import synth_scene

SCHEMA_ID = "octattn-report/1"
DEFAULT_BENCH_SIZES = [2**i for i in range(10, 16)]

logger = logging.getLogger("octattn")


def make_report(command: str, cfg: RunConfig, result: dict) -> dict:
    return {"schema": SCHEMA_ID, "command": command, "config": cfg.to_dict(), "result": result}


def _load_config(args) -> RunConfig:
    data = {}
    if args.config:
        with open(args.config) as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ConfigError(f"{args.config}: config must be a JSON object")
    if args.wod and "voxel_size" not in data:
        data["voxel_size"] = [0.1, 0.1, 0.1875]
    if args.seed is not None:
        data["seed"] = args.seed
    if args.mode is not None:
        data["mode"] = args.mode
    return RunConfig.from_dict(data)


def _synth_clouds(args, cfg: RunConfig):
    pc, boxes = synth_scene(
        cfg.seed, args.objects, args.points_per_object, args.background, cfg.range_min, cfg.range_max
    )
    return [pc], boxes


def _read_inputs(paths: Sequence[str], fmt: str):
    clouds = []
    for i, path in enumerate(paths):
        if not os.path.exists(path):
            raise OSError(f"cannot read input {path}: no such file")
        clouds.append(load_points(path, fmt, scene_id=i))
    return clouds


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with RunConfig fields")
    common.add_argument("--seed", type=int)
    common.add_argument("--mode", choices=("train", "infer"))
    common.add_argument("--out", help="write the JSON report here instead of stdout")
    common.add_argument("--wod", action="store_true", help="use the WOD voxel size")
    common.add_argument("-v", "--verbose", action="store_true")

    scene = argparse.ArgumentParser(add_help=False)
    scene.add_argument("--input", nargs="*", default=[], help="point files, one scene each")
    scene.add_argument("--format", default="auto", choices=("auto", "csv", "bin_f32x4"))
    scene.add_argument("--objects", type=int, default=3)
    scene.add_argument("--points-per-object", type=int, default=600)
    scene.add_argument("--background", type=int, default=2000)

    parser = argparse.ArgumentParser(prog="octattn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("forward", parents=[common, scene], help="run the two-layer backbone")
    p = sub.add_parser("oracle", parents=[common, scene], help="compare against the dense oracle")
    p.add_argument("--scenes", type=int, default=20, help="number of seeded synthetic scenes")
    p = sub.add_parser("bench", parents=[common], help="attention MAC scaling benchmark")
    p.add_argument("--sizes", type=int, nargs="+", default=DEFAULT_BENCH_SIZES)
    p.add_argument("--count-only", action="store_true", help="count dense MACs without executing")
    p = sub.add_parser("train-seg", parents=[common], help="toy foreground segmentation training")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.5)
    p = sub.add_parser("synth", parents=[common, scene], help="write a synthetic scene to disk")
    p.add_argument("--points-out", required=True)
    p.add_argument("--boxes-out", required=True)
    return parser


def run(args) -> dict:
    cfg = _load_config(args)
    if args.command == "forward":
        clouds = _read_inputs(args.input, args.format) if args.input else _synth_clouds(args, cfg)[0]
        return make_report("forward", cfg, run_forward(cfg, clouds))
    if args.command == "oracle":
        clouds = _read_inputs(args.input, args.format) if args.input else None
        return make_report("oracle", cfg, run_oracle(cfg, range(cfg.seed, cfg.seed + args.scenes), clouds))
    if args.command == "bench":
        return make_report("bench", cfg, run_bench_report(cfg, args.sizes, not args.count_only))
    if args.command == "train-seg":
        return make_report("train-seg", cfg, run_trainseg(cfg, args.steps, args.lr))
    if args.command == "synth":
        (pc,), boxes = _synth_clouds(args, cfg)
        fmt = "csv" if args.points_out.lower().endswith(".csv") else "bin_f32x4"
        save_points(args.points_out, pc, fmt)
        save_boxes(args.boxes_out, boxes)
        result = {"points": len(pc), "boxes": int(boxes.shape[0]), "points_path": args.points_out,
                  "boxes_path": args.boxes_out}
        return make_report("synth", cfg, result)
    raise ValueError(args.command)


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        report = run(args)
    except (ConfigError, OracleRefusal, PointFileError, OSError, ValueError) as exc:
        print(f"octattn {args.command}: error: {exc}", file=sys.stderr)
        return 2
    text = json.dumps(report, indent=2, default=_jsonable)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    result = report["result"]
    return 0 if result.get("passed", True) else 1


if __name__ == "__main__":
    sys.exit(main())
