"""Command-line front end: generate, train-heads, segment, evaluate, bench.

Exit codes: 0 success, 1 usage error, 2 unreadable or inconsistent data,
3 numerical failure.  VMOS_THREADS bounds the per-target worker pool
(0 or unset picks one thread per cpu).
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .config import PipelineConfig
from .dataio import (
    load_run_params,
    read_video,
    save_run_params,
    write_video,
)
from .errors import ContractError, DataError, NumericalError
from .heads import HeadParams, train_heads
from .metrics import evaluate
from .pipeline import build_training_samples, default_sgm, run_pipeline
from .synth import identity_scene, occlusion_scene, random_scene, render_scene

_SCENES = ("random", "identity", "occlusion")


class _Parser(argparse.ArgumentParser):
    """argparse, but usage mistakes exit with status 1 instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _load_config(args) -> PipelineConfig:
    config = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    return config


def _take(items, limit):
    return list(items) if limit is None else list(items)[:limit]


def cmd_generate(args) -> int:
    frames = args.frames
    if args.scene == "identity":
        scene = identity_scene(**({} if frames is None else {"frames": frames}))
    elif args.scene == "occlusion":
        scene = occlusion_scene(**({} if frames is None else {"frames": frames}))
    else:
        seed = 0 if args.seed is None else args.seed
        scene = random_scene(seed, **({} if frames is None else {"frames": frames}))
    rendered, gt = render_scene(scene)
    write_video(args.out, rendered, masks=gt.masks)
    print(f"wrote {len(rendered)} frames to {args.out}")
    return 0


def cmd_train_heads(args) -> int:
    config = _load_config(args)
    frames, gt, _ = read_video(args.data)
    if gt is None:
        raise DataError(f"{args.data} has no instance labelings to train on")
    if args.frames is not None and args.frames < len(frames):
        idx = np.unique(np.linspace(0, len(frames) - 1, args.frames).astype(int))
        frames = [frames[i] for i in idx]
        gt_masks = [gt.masks[i] for i in idx]
    else:
        gt_masks = gt.masks
    sgm = default_sgm(config)
    dataset = build_training_samples(frames, gt_masks, config, sgm)
    params, trace = train_heads(dataset, config, seed=config.seed)
    save_run_params(args.out, params, sgm)
    print(f"trained on {len(dataset)} frames for {len(trace)} steps: "
          f"loss {trace[0]:.4f} -> {trace[-1]:.4f}")
    print(f"wrote parameters to {args.out}")
    return 0


def cmd_segment(args) -> int:
    config = _load_config(args)
    frames, _, _ = read_video(args.data, with_masks=False)
    frames = _take(frames, args.frames)
    heads, sgm = load_run_params(args.params)
    result = run_pipeline(frames, heads, config, sgm=sgm or None)
    write_video(args.out, frames, masks=result.masks.masks)
    record_path = os.path.join(args.out, "run.json")
    with open(record_path, "w", encoding="utf-8") as fh:
        fh.write(result.record.to_json())
    ids = result.masks.track_ids()
    print(f"segmented {len(frames)} frames: {len(ids)} tracks {ids}")
    print(f"wrote masks to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    _, pred, _ = read_video(args.pred)
    _, gt, _ = read_video(args.gt)
    if pred is None or gt is None:
        raise DataError("both videos must carry instance labelings")
    report = evaluate(pred, gt)
    blob = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(blob + "\n")
    print(blob)
    return 0


def cmd_bench(args) -> int:
    config = _load_config(args)
    n = 60 if args.frames is None else args.frames
    frames, _ = render_scene(identity_scene(frames=n))
    if args.params:
        heads, sgm = load_run_params(args.params)
        sgm = sgm or None
    else:
        heads, sgm = HeadParams.seeded(config, seed=config.seed), None
    result = run_pipeline(frames, heads, config, sgm=sgm)
    stats = result.record.mean_ms()
    print(f"frames:   {len(frames)} at {frames[0].height}x{frames[0].width}, "
          f"{config.channels} channels")
    print(f"proposal: {stats['proposal']:8.2f} ms/frame")
    print(f"tracking: {stats['tracking']:8.2f} ms/frame")
    print(f"total:    {stats['total']:8.2f} ms/frame")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vmos",
                     description="segment and track every object in a video")
    sub = parser.add_subparsers(dest="verb", metavar="verb")

    def common(p, *, config=True):
        if config:
            p.add_argument("--config", help="pipeline configuration JSON")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--frames", type=int, help="process at most this many frames")

    p = sub.add_parser("generate", help="render a synthetic video directory")
    p.add_argument("--out", required=True, help="output video directory")
    p.add_argument("--scene", choices=_SCENES, default="random")
    common(p, config=False)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train-heads", help="fit the decoders on a labeled video")
    p.add_argument("--data", required=True, help="video directory with labelings")
    p.add_argument("--out", required=True, help="parameter file to write")
    common(p)
    p.set_defaults(func=cmd_train_heads)

    p = sub.add_parser("segment", help="run the tracker over a video directory")
    p.add_argument("--data", required=True, help="input video directory")
    p.add_argument("--params", required=True, help="trained parameter file")
    p.add_argument("--out", required=True, help="output video directory")
    common(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", help="score predicted labelings against truth")
    p.add_argument("--pred", required=True, help="predicted video directory")
    p.add_argument("--gt", required=True, help="ground-truth video directory")
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="time the pipeline on the standard suite")
    p.add_argument("--params", help="trained parameter file (seeded if omitted)")
    common(p)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "func"):
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except (DataError, ContractError, OSError) as exc:
        print(f"vmos: data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"vmos: numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
