"""Command-line driver.

Exit codes: 0 success, 2 configuration error, 3 verification failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import torch

from .config import apply_overrides, from_dict, load_yaml, to_dict
from .container import ContainerFormatError
from .grid import ConfigError

log = logging.getLogger("bevkd")

EXIT_OK, EXIT_CONFIG, EXIT_VERIFY = 0, 2, 3


def parse_seeds(text: str) -> List[int]:
    """``"0..8"`` (end exclusive) or a comma list ``"1,5,9"``."""
    try:
        if ".." in text:
            a, b = text.split("..", 1)
            seeds = list(range(int(a), int(b)))
        else:
            seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse seeds {text!r}") from None
    if not seeds:
        raise ConfigError(f"seed range {text!r} is empty")
    return seeds


def _load(args, cls, section: Optional[str] = None):
    data = load_yaml(args.config)
    if section is not None:
        data = data.get(section, data)
    data = apply_overrides(data, args.set)
    return from_dict(cls, data)


def _run_config(args):
    from .experiments import RunConfig

    cfg = _load(args, RunConfig)
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    if getattr(args, "data", None):
        cfg = replace(cfg, dataset=args.data)
    if cfg.dataset is None:
        raise ConfigError("no training dataset given (use --data or dataset: in the config)")
    return cfg


def cmd_gen(args) -> int:
    from .synthetic import WorldConfig, generate_scene, write_dataset

    world = _load(args, WorldConfig)
    samples = [generate_scene(s, world) for s in parse_seeds(args.seeds)]
    write_dataset(samples, args.out, world=to_dict(world))
    print(f"wrote {len(samples)} scenes to {args.out}")
    return EXIT_OK


def cmd_train_teacher(args) -> int:
    from .experiments import train_teacher

    cfg = _run_config(args)
    ckpt = train_teacher(cfg.dataset, cfg)
    print(f"teacher trained for {ckpt.step} steps; final loss {ckpt.trainer.losses()[-1]:.6f}"
          if ckpt.trainer.log else "teacher saved without training steps")
    return EXIT_OK


def cmd_train_student(args) -> int:
    from .experiments import train_student

    cfg = _run_config(args)
    ckpt = train_student(cfg.dataset, args.teacher, cfg, use_kd=not args.no_kd)
    if ckpt.trainer.log:
        print(f"student trained for {ckpt.step} steps; final loss {ckpt.trainer.losses()[-1]:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .experiments import evaluate, evaluate_dump

    bands = args.bands
    if args.predictions:
        rep = evaluate_dump(args.predictions, args.data, bands, args.out)
    else:
        rep = evaluate(args.checkpoint, args.data, bands, args.out, dump=args.dump)
    g = rep["global"]
    print(f"IoU {100 * g['iou']:.2f}  mIoU {100 * g['miou']:.2f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .experiments import ablate

    cfg = _run_config(args)
    values = [float(v) if args.axis == "lambda" else int(v) for v in args.values.split(",")] if args.values else None
    rows = ablate(cfg, args.axis, cfg.dataset, cfg.eval_dataset or args.test, args.teacher, values, args.out)
    for r in rows:
        print(f"{r['setting']:<16} IoU {100 * r['iou']:.2f}  mIoU {100 * r['miou']:.2f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import corrupted_op, run_gradcheck

    torch.set_num_threads(1)
    extra = {"corrupted_fixture": corrupted_op} if args.corrupt else None
    report = run_gradcheck(args.seed, args.threshold, extra=extra)
    text = report.format()
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return EXIT_OK if report.passed else EXIT_VERIFY


def cmd_report(args) -> int:
    from .experiments import loss_curve_svg

    out = loss_curve_svg(args.losses, args.out, args.names.split(","))
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bevkd", description="BEV fusion completion and distillation experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, out_required=False):
        sp.add_argument("--config", help="YAML file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path override, repeatable")
        sp.add_argument("--out", required=out_required)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    common(g, out_required=True)
    g.add_argument("--seeds", required=True, help="'a..b' (b exclusive) or comma list")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train-teacher", help="train the lidar + camera teacher")
    common(t)
    t.add_argument("--data")
    t.set_defaults(func=cmd_train_teacher)

    s = sub.add_parser("train-student", help="distill a teacher into a radar student")
    common(s)
    s.add_argument("--data")
    s.add_argument("--teacher", help="teacher checkpoint")
    s.add_argument("--no-kd", action="store_true", help="train the student without a teacher")
    s.set_defaults(func=cmd_train_student)

    e = sub.add_parser("eval", help="evaluate a checkpoint or a prediction dump")
    e.add_argument("--checkpoint")
    e.add_argument("--predictions", help="re-evaluate a prediction dump instead")
    e.add_argument("--data", required=True)
    e.add_argument("--bands", default="desk", help="'desk' or 'paper'")
    e.add_argument("--dump", help="write predictions to this LCR1 file")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation table")
    common(a)
    a.add_argument("--data")
    a.add_argument("--test")
    a.add_argument("--teacher")
    a.add_argument("--axis", choices=["stages", "kd_components", "kl_direction", "lambda"])
    a.add_argument("--stages", action="store_const", const="stages", dest="axis_flag",
                   help="shorthand for --axis stages")
    a.add_argument("--values", help="comma list of settings for the axis")
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--threshold", type=float, default=1e-4)
    c.add_argument("--corrupt", action="store_true", help="add a deliberately wrong gradient fixture")
    c.add_argument("--out")
    c.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("report", help="plot loss curves to SVG")
    r.add_argument("losses", nargs="+", help="*_losses.csv files")
    r.add_argument("--names", default="total")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.verb == "ablate":
        args.axis = args.axis or args.axis_flag
        if args.axis is None:
            print("error: ablate needs --axis or --stages", file=sys.stderr)
            return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, ContainerFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
