"""Command-line entry point (``bevfg``).

Exit codes: 0 success, 1 contract violation, 2 I/O failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from ..errors import ContractError, IoError
from ..synthscene import emit_dataset, random_scene_spec
from .checkpoint import Checkpoint
from .config import Config
from .train import evaluate, finetune, network_from_checkpoint, pretrain, render, resolve_frame


def _config(path: Optional[str]) -> Config:
    return Config.load(path) if path else Config()


def cmd_gen_scenes(args) -> None:
    baseline = args.stereo_baseline if args.stereo_baseline > 0 else None
    specs = [random_scene_spec(args.seed + i, args.frames, stereo_baseline=baseline) for i in range(args.count)]
    manifest = emit_dataset(specs, args.out, args.val_fraction)
    print(f"wrote {len(manifest['scenes'])} scenes to {args.out}")


def cmd_pretrain(args) -> None:
    cfg = _config(args.config)
    resume = Checkpoint.load(args.resume) if args.resume else None
    ckpt, log = pretrain(cfg, args.data, out=args.out, resume=resume, log_path=args.log)
    ckpt.save(args.out)
    print(f"pretrained {ckpt.step} steps; checkpoint at {args.out}")


def cmd_finetune(args) -> None:
    cfg = _config(args.config)
    init = None if args.init in (None, "none") else Checkpoint.load(args.init)
    ckpt, _, history = finetune(cfg, init, args.data, args.fraction, out=args.out, log_path=args.log,
                                val_data=args.data)
    ckpt.save(args.out)
    for row in history:
        print(json.dumps(row))


def cmd_eval(args) -> None:
    net = network_from_checkpoint(Checkpoint.load(args.ckpt))
    metrics = evaluate(net, args.data, args.split)
    text = json.dumps(metrics, indent=1, sort_keys=True) + "\n"
    if args.json:
        try:
            Path(args.json).write_text(text)
        except OSError as e:
            raise IoError(f"cannot write {args.json}: {e}") from e
    else:
        sys.stdout.write(text)


def cmd_render(args) -> None:
    net = network_from_checkpoint(Checkpoint.load(args.ckpt))
    image, K, name = resolve_frame(args.frame, args.data)
    paths = render(net, image, K, args.out, name)
    for p in paths.values():
        print(p)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bevfg", description="BEV pretraining on synthetic street scenes")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scenes", help="render a synthetic dataset")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--frames", type=int, default=8)
    g.add_argument("--stereo-baseline", type=float, default=0.5, help="metres; 0 disables the second camera")
    g.add_argument("--val-fraction", type=float, default=0.2)
    g.set_defaults(func=cmd_gen_scenes)

    t = sub.add_parser("pretrain", help="self-supervised pretraining")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--log", help="CSV loss log")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_pretrain)

    f = sub.add_parser("finetune", help="train the BEV head on a labeled fraction")
    f.add_argument("--config")
    f.add_argument("--init", help="pretrained checkpoint, or 'none' for a scratch backbone")
    f.add_argument("--fraction", type=float, required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--log", help="CSV loss log")
    f.set_defaults(func=cmd_finetune)

    e = sub.add_parser("eval", help="BEV mIoU and depth error on a split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val")
    e.add_argument("--json", help="output path (stdout when omitted)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="write depth and BEV maps for one frame")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--frame", required=True, help="scene_id:index with --data, or a PPM path")
    r.add_argument("--data", help="dataset directory for scene_id:index frames")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ContractError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
