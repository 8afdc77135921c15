"""
Command-line entry point.

    msscab --config cfg.json <stage>
    msscab --config cfg.json pipeline
    msscab --out data gen-synthetic --n-scenes 30

Failures exit non-zero and print a JSON error object on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .pipeline import STAGES, ConfigError, PipelineConfig, StageError, run_pipeline, run_stage
from .synthetic import SyntheticSceneSpec, gen_synthetic


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="pipeline config JSON")
    parser.add_argument("--out", default=default, help="output directory (overrides config)")
    parser.add_argument("--seed", type=int, default=default, help="override every stage seed")
    parser.add_argument("--jobs", type=int, default=default, help="parallel workers per stage")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msscab", description=__doc__.split("\n\n")[0].strip())
    _global_flags(parser, suppress=False)
    parser.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        p = sub.add_parser(stage, parents=[common], help=f"run the {stage} stage")
        if stage == "evaluate":
            p.add_argument("--predictions", help="detections file (image_id class conf x1 y1 x2 y2)")
    sub.add_parser("pipeline", parents=[common], help="run every stage in order")

    g = sub.add_parser("gen-synthetic", parents=[common], help="write a synthetic dataset and its config")
    g.add_argument("--n-scenes", type=int, default=30)
    g.add_argument("--size", type=int, default=128, help="square image side in pixels")
    g.add_argument("--sd-scale", type=float, default=1.0, help="multiplier on every class SD")
    g.add_argument("--band-sd-scale", type=float, nargs=8, metavar="S", help="per-band SD multipliers")
    g.add_argument("--lesions", type=int, nargs=2, default=(1, 4), metavar=("MIN", "MAX"))
    g.add_argument("--lesion-axes", type=float, nargs=2, default=(4.0, 10.0), metavar=("MIN", "MAX"))
    return parser


def _load_config(args) -> PipelineConfig:
    if not args.config:
        raise ConfigError("--config is required for this command")
    cfg = PipelineConfig.load(args.config)
    if args.out:
        cfg.out = str(Path(args.out).resolve())
    if args.seed is not None:
        cfg.override_seed(args.seed)
    if args.jobs is not None:
        cfg.jobs = args.jobs
    return cfg


def _gen_synthetic(args) -> dict:
    out = Path(args.out or "synthetic")
    kwargs = dict(
        height=args.size,
        width=args.size,
        sd_scale=args.sd_scale,
        lesion_count=tuple(args.lesions),
        lesion_axes=tuple(args.lesion_axes),
        seed=args.seed if args.seed is not None else 0,
    )
    if args.band_sd_scale:
        kwargs["band_sd_scale"] = tuple(args.band_sd_scale)
    spec = SyntheticSceneSpec(**kwargs)
    manifest = gen_synthetic(spec, args.n_scenes, out)
    config = {
        "manifest": "manifest.json",
        "white": {"default": {"cube": "white.raw", "patch": "white_patch.json"}},
        "out": "pipeline_out",
        "lda": {"per_class": 5000, "heldout_per_class": 2000, "seed": 0},
        "segnet": {"per_class": 5000, "epochs": 100, "batch_size": 256, "learning_rate": 0.01, "seed": 0},
    }
    (out / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    return {"scenes": len(manifest), "manifest": str(out / "manifest.json"), "config": str(out / "config.json")}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    command = args.command
    try:
        if command == "gen-synthetic":
            result = _gen_synthetic(args)
        else:
            cfg = _load_config(args)
            if command == "evaluate" and getattr(args, "predictions", None):
                cfg.evaluation.predictions = str(Path(args.predictions).resolve())
            if command == "pipeline":
                outputs = run_pipeline(cfg)
                result = {stage: len(paths) for stage, paths in outputs.items()}
            else:
                result = {command: len(run_stage(command, cfg))}
            result["out"] = str(cfg.out_dir)
    except (ConfigError, StageError, ValueError, OSError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "command": command}
        if isinstance(exc, StageError):
            err["stage"] = exc.stage
        print(json.dumps(err), file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True))
    return 0
