"""``megan`` command line: synth, train, infer, eval, gradcheck.

Exit codes: 0 success, 1 invalid input or flags, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import data, gradsuite, metrics, model, train
from .tensor import FormatError, MeganError, ShapeError, save_tensor

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

# errors that mean "the user asked for something impossible" rather than "it broke"
_INVALID = (train.ConfigError, ShapeError, data.DataError)

log = logging.getLogger("megan")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def cmd_synth(args) -> int:
    if args.size % data.SCALE:
        raise ShapeError(f"--size {args.size} must be divisible by {data.SCALE}")
    ids = data.synth_generate(args.out, args.seed, args.clips, args.size, args.objects)
    print(f"wrote {len(ids)} clips to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    tcfg, cfg = train.load_config(args.config)
    clips = data.load_dataset(args.data)
    lr_size = clips[0].lr_frames.shape[-1]
    if tcfg.crop > min(clips[0].lr_frames.shape[-2:]):
        raise train.ConfigError(f"crop {tcfg.crop} exceeds the {lr_size}-pixel LR frames")
    result = train.train_loop(tcfg, cfg, clips, out_path=args.out, resume=args.resume)
    last = f"{result.losses[-1]:.6f}" if result.losses else "n/a"
    print(f"trained to iteration {result.iteration}, last loss {last}; wrote {args.out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    out_dir = Path(args.out)
    data.prepare_output_dir(out_dir)
    frames = data.read_lr_dir(args.inp)
    entries = model.load_checkpoint(args.ckpt)
    P, cfg = model.split_model_entries(entries)
    if frames.shape[0] != cfg.n + 1:
        raise ShapeError(f"checkpoint expects {cfg.n + 1} LR frames, found {frames.shape[0]}")
    out = model.megan_infer(frames, P, cfg, args.seed)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".infer-", dir=out_dir.parent))
    try:
        for t, f in enumerate(out, 1):
            data.png_encode(f, tmp / f"hr_{t}.png")
            if args.dump_tensors:
                save_tensor(tmp / f"hr_{t}.mgt", f)
        data.publish_dir(tmp, out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    print(f"wrote {len(out)} frames to {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    print(metrics.evaluate_dirs(args.pred, args.gt).format())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    os.environ["MEGAN_REFERENCE_PRECISION"] = "f64"
    names = [args.op] if args.op else list(gradsuite.SUITE)
    unknown = [n for n in names if n not in gradsuite.SUITE]
    if unknown:
        raise UsageError(f"unknown op {unknown[0]!r}; choose from {', '.join(gradsuite.SUITE)}")
    failed = 0
    for name in names:
        worst = None
        for seed in range(args.seeds):
            rep = gradsuite.run(name, seed, args.h, args.tol)
            if worst is None or not rep.passed or rep.max_rel_error > worst.max_rel_error:
                worst = rep
            if not rep.passed:
                break
        print(worst.format())
        failed += not worst.passed
    print(f"max rel error check: {len(names) - failed}/{len(names)} ops passed at tol {args.tol:g}")
    return EXIT_OK if failed == 0 else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="megan", description="Space-time video super-resolution at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="render a synthetic clip dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--clips", type=int, required=True)
    s.add_argument("--size", type=int, required=True, help="HR frame size, divisible by 4")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--objects", type=int, default=2)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train on a synth dataset")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path; the trace goes to OUT.trace.csv")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="reconstruct HR frames from lr_*.png")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--in", dest="inp", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--seed", type=int, default=0, help="memory-pool sampling seed")
    i.add_argument("--dump-tensors", action="store_true", help="also write hr_t.mgt tensors")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="PSNR/SSIM of predicted against ground-truth frames")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference checks of the registered ops")
    g.add_argument("--op", help=f"one of: {', '.join(gradsuite.SUITE)}")
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--h", type=float, default=1e-5)
    g.add_argument("--seeds", type=int, default=10)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"megan: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except _INVALID as exc:
        print(f"megan: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (MeganError, FormatError, OSError, KeyError) as exc:
        print(f"megan: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
