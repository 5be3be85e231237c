"""``m2restore`` command line: gen, train, eval, infer, analyze.

Exit codes: 0 success, 2 usage or validation failure, 3 non-finite loss.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import UnidentifiedImageError

from . import checkpoint as ckpt_io
from . import plotting
from .config import DEGRADATION_CLASSES, RunConfig
from .data import generate_corpus, load_split, read_image, write_image
from .errors import (CheckpointFormatError, CheckpointIntegrityError, ConfigError, ContractError,
                     NumericalError, ShapeError)
from .evaluate import analyze_routing, eval_csv, eval_table, evaluate, restore, routing_csv, routing_summary
from .train import Trainer, load_model

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    over = {}
    if getattr(args, "steps", None) is not None:
        over["steps"] = args.steps
    if getattr(args, "variant", None) is not None:
        over["variant"] = args.variant
    return cfg.replace(**over) if over else cfg


def _prepare_out(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()) and not force:
        raise ContractError(f"{out} exists and is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)


def cmd_gen(args) -> int:
    cfg = _load_config(args)
    if args.seed is not None:
        cfg = cfg.replace(corpus_seed=args.seed)
    out = Path(args.out)
    counts = generate_corpus(cfg, out, force=args.force)
    (out / "config.txt").write_text(cfg.to_text())
    for (split, kind), n in counts.items():
        print(f"{split:<6}{kind:<10}{n}")
    print(f"total {sum(counts.values())} samples written to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    out = Path(args.out)
    resume = None
    if args.resume:
        resume = ckpt_io.load(args.resume)
        cfg = RunConfig.from_text(resume.config_text)
        if args.steps is not None:
            cfg = cfg.replace(steps=args.steps)
        out.mkdir(parents=True, exist_ok=True)
    else:
        cfg = _load_config(args)
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed, init_seed=args.seed)
        _prepare_out(out, args.force)
    data = load_split(args.corpus, "train")
    trainer = Trainer(cfg, data, out, log=print)
    t0 = time.perf_counter()
    try:
        trainer.run(resume=resume)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"aborted at step {exc.step}", file=sys.stderr)
        return EXIT_NUMERIC
    if trainer.metrics_path.exists():
        plotting.training_curves(trainer.metrics_path, out / "training_curves.png")
    print(f"trained {trainer.step} steps in {time.perf_counter() - t0:.1f} s; "
          f"checkpoint {trainer.checkpoint_path(trainer.step)}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, provider, _, _ = load_model(args.checkpoint)
    data = load_split(args.corpus, args.split)
    rows = evaluate(model, provider, data)
    print(eval_table(rows))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.csv").write_text(eval_csv(rows))
        plotting.eval_bars(rows, out / "eval_psnr.png")
    else:
        sys.stdout.write(eval_csv(rows))
    return EXIT_OK


def pad_to_multiple(img: np.ndarray, m: int) -> np.ndarray:
    """Reflect-pad ``(3,H,W)`` on the bottom/right so both extents divide ``m``."""
    H, W = img.shape[1:]
    ph, pw = (-H) % m, (-W) % m
    if ph == 0 and pw == 0:
        return img
    mode = "reflect" if ph < H and pw < W else "symmetric"
    return np.pad(img, ((0, 0), (0, ph), (0, pw)), mode=mode)


def cmd_infer(args) -> int:
    model, provider, _, _ = load_model(args.checkpoint)
    try:
        img = read_image(args.input)
    except (OSError, UnidentifiedImageError) as exc:
        raise ContractError(f"cannot read image {args.input}: {exc}") from None
    labels = None
    if args.type is not None:
        labels = [DEGRADATION_CLASSES.index(args.type)]
    H, W = img.shape[1:]
    padded = pad_to_multiple(img, model.multiple)
    if min(padded.shape[1:]) < 8:
        raise ContractError(f"image {H}x{W} is too small (need at least 8x8)")
    t0 = time.perf_counter()
    out = restore(model, provider, padded[None], labels)[0]
    elapsed = time.perf_counter() - t0
    write_image(args.output, out[:, :H, :W])
    print(f"restored {H}x{W} image in {elapsed:.3f} s")
    return EXIT_OK


def cmd_analyze(args) -> int:
    model, provider, _, _ = load_model(args.checkpoint)
    data = load_split(args.corpus, args.split)
    rep = analyze_routing(model, provider, data)
    print(routing_summary(rep))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "routing.csv").write_text(routing_csv(rep))
        (out / "routing_summary.txt").write_text(routing_summary(rep) + "\n")
        plotting.usage_histogram(rep.usage, out / "usage.png")
        plotting.cosine_heatmap(rep.cosine, rep.kinds, out / "cosine.png")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="m2restore", description="Desk-scale all-in-one weather restoration.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate the synthetic corpus")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, help="override corpus_seed")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model on a corpus")
    t.add_argument("--config")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--variant", choices=["full", "no_dgf", "no_dder", "dder_only"])
    t.add_argument("--seed", type=int, help="override the training and init seeds")
    t.add_argument("--resume", help="continue from this checkpoint")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="PSNR/SSIM report on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--split", default="val")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="restore one image")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--type", choices=list(DEGRADATION_CLASSES), help="label for the oracle prior")
    i.add_argument("input")
    i.add_argument("output")
    i.set_defaults(func=cmd_infer)

    a = sub.add_parser("analyze", help="routing specialisation report")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--corpus", required=True)
    a.add_argument("--split", default="val")
    a.add_argument("--out")
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ContractError, ShapeError, FileNotFoundError, CheckpointFormatError,
            CheckpointIntegrityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
