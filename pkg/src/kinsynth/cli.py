"""Command-line entry point: ``kinsynth train|generate|evaluate|make-toy``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import dataio
from .config import load_config
from .errors import ConfigError, KinsynthError

log = logging.getLogger("kinsynth")

RUNS_ROOT_ENV = "KINSYNTH_RUNS_ROOT"
RUN_SUBDIRS = ("config", "checkpoints", "logs", "samples", "reports")


def runs_root() -> Path:
    return Path(os.environ.get(RUNS_ROOT_ENV, "runs"))


def run_dir_for(name: str) -> Path:
    d = runs_root() / name
    for sub in RUN_SUBDIRS:
        (d / sub).mkdir(parents=True, exist_ok=True)
    return d


def cmd_train(args) -> int:
    from .train import Trainer, load_checkpoint

    cfg = load_config(args.config)
    cfg.check_paths()
    run_dir = run_dir_for(cfg.name)
    if args.resume:
        trainer = Trainer.from_checkpoint(load_checkpoint(args.resume), cfg, run_dir)
    else:
        trainer = Trainer(cfg, run_dir)
    trainer.run()
    last = trainer.history[-1] if trainer.history else None
    msg = f"trained {cfg.name} to step {trainer.step}; run directory {run_dir}"
    if last:
        msg += f"; con_C={last['con_C']:.4f} k_t={last['k_t']:.4f} M={last['M']:.4f}"
    print(msg)
    return 0


def cmd_generate(args) -> int:
    from .encoder_zoo import to_images
    from .train import generator_from_checkpoint, load_checkpoint

    if not args.both_genders and args.gender is None:
        raise ConfigError("--gender is required unless --both-genders is given")
    g = generator_from_checkpoint(load_checkpoint(args.checkpoint))
    x = dataio.load_image(args.input, g.encoder.arch.side)
    out = Path(args.out)
    if args.both_genders:
        genders = [dataio.Gender.MALE, dataio.Gender.FEMALE]
        targets = [out.with_name(f"{out.stem}_{gd.name.lower()}{out.suffix or '.png'}") for gd in genders]
    else:
        genders = [dataio.Gender.parse(args.gender)]
        targets = [out]
    with torch.no_grad():
        y = g.generate_child(np.stack([x] * len(genders)), torch.tensor(np.stack([gd.one_hot for gd in genders])))
    for img, path in zip(to_images(y), targets):
        dataio.write_png(img, path)
        print(path)
    return 0


def cmd_evaluate(args) -> int:
    from .config import parse_config
    from .encoder_zoo import load_pretrained_encoder
    from .eval import evaluate_model
    from .train import load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    cfg = parse_config(ckpt.config)
    weights = args.encoder or cfg.eval.encoder_weights or cfg.encoder.weights
    if weights is None:
        raise ConfigError("no embedding encoder: pass --encoder or set eval.encoder_weights")
    enc = load_pretrained_encoder(weights)
    pairs = dataio.load_pair_manifest(args.manifest)
    report = evaluate_model(ckpt, pairs, enc, args.k, cfg.eval.gallery)
    out = Path(args.out) if args.out else run_dir_for(cfg.name) / "reports" / f"eval_k{args.k}.json"
    report.write(out, per_query=args.per_query)
    print(f"top-{args.k} accuracy {report.accuracy:.4f} over {len(report.query_ids)} queries "
          f"({len(report.skipped)} skipped); report {out}")
    return 0


def cmd_make_toy(args) -> int:
    from .encoder_zoo import EncoderArch, TinyEncoderConfig, save_encoder, train_tiny_face_encoder
    from .toy import identity_views, make_toy_dataset

    out = Path(args.out)
    paths = make_toy_dataset(out, n_train=args.train_pairs, n_val=args.val_pairs, n_reg=args.reg_faces,
                             side=args.side, seed=args.seed)
    images, labels = identity_views(args.identities, args.views, args.side, seed=args.seed + 1)
    enc = train_tiny_face_encoder(images, labels, TinyEncoderConfig(
        arch=EncoderArch(side=args.side), epochs=args.encoder_epochs, seed=args.seed))
    weights = save_encoder(enc, out / "encoder.npz")
    cfg = {
        "name": "toy",
        "seed": args.seed,
        "checkpoint_every": 500,
        "data": {"pairs": paths.train_pairs.name, "attributes": paths.attributes.name, "image_side": args.side},
        "encoder": {"weights": weights.name},
        "optim": {"batch_size": 8, "max_steps": 2000},
        "eval": {"k": 5},
    }
    (out / "config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=False), encoding="utf-8")
    print(f"toy dataset, encoder weights and config.yaml written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kinsynth", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from an experiment config")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="synthesize a child face from a parent photo")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--input", required=True)
    g.add_argument("--gender", choices=["male", "female"])
    g.add_argument("--both-genders", action="store_true")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", help="top-k retrieval accuracy on a pair manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--k", type=int, default=100)
    e.add_argument("--out")
    e.add_argument("--encoder", help="embedding encoder weights (default: from the checkpoint's config)")
    e.add_argument("--per-query", action="store_true", help="include ranked lists in the report")
    e.set_defaults(func=cmd_evaluate)

    m = sub.add_parser("make-toy", help="write a synthetic dataset, tiny encoder and config")
    m.add_argument("--out", required=True)
    m.add_argument("--side", type=int, default=32)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--train-pairs", type=int, default=48)
    m.add_argument("--val-pairs", type=int, default=16)
    m.add_argument("--reg-faces", type=int, default=128)
    m.add_argument("--identities", type=int, default=20)
    m.add_argument("--views", type=int, default=30)
    m.add_argument("--encoder-epochs", type=int, default=8)
    m.set_defaults(func=cmd_make_toy)
    return p


def _code(exc: BaseException) -> tuple[str, int]:
    if isinstance(exc, ConfigError):
        return exc.code, 2
    if isinstance(exc, KinsynthError):
        return exc.code, 3
    if isinstance(exc, FileNotFoundError):
        return "FILE_NOT_FOUND", 4
    if isinstance(exc, OSError):
        return "IO_ERROR", 4
    return "INVALID_ARGUMENT", 5


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (KinsynthError, OSError, ValueError) as exc:
        code, status = _code(exc)
        msg = " ".join(str(exc).split())
        print(f"ERROR {code}: {msg}", file=sys.stderr)
        return status


if __name__ == "__main__":
    sys.exit(main())
