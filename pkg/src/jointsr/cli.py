"""Command-line entry point.

Subcommands: synth-data, make-masks, train-prior, train, eval,
study {locations,sizes,baselines,cross,ablations}, recover.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import torch

from . import config as config_mod
from .data import Corpus, corpus_records, generate_synthetic_corpus, load_corpus, validate_record
from .imaging import ImageIOError, load_image, save_image
from .models import PatchDiscriminator
from .occlusion import (
    center_block_mask,
    grid_block_mask,
    load_mask,
    random_block_mask,
    save_mask,
)
from .serialization import ContainerError
from .studies import (
    run_ablation_study,
    run_baseline_comparison,
    run_cross_dataset,
    run_location_study,
    run_size_study,
    run_standard_eval,
)
from .trainer import Trainer, TrainingError, load_generator

log = logging.getLogger("jointsr")


def _load_run_config(args) -> config_mod.RunConfig:
    cfg = config_mod.load_config(getattr(args, "config", None))
    seed = getattr(args, "seed", None)
    if seed is not None:
        cfg = config_mod.from_mapping({"train.seed": seed}, cfg)
    print("# effective configuration", file=sys.stderr)
    print(cfg.describe(), file=sys.stderr)
    disc = PatchDiscriminator(cfg.model.channels, cfg.model.disc_width, cfg.model.disc_depth)
    hr = cfg.data.hr_size
    print(f"# discriminator: score map {disc.score_shape(hr, hr)} at {hr}x{hr}, "
          f"receptive field {disc.receptive_field()} px", file=sys.stderr)
    return cfg


def _corpus(cfg: config_mod.RunConfig) -> Corpus:
    d = cfg.data
    if d.corpus:
        return load_corpus(d.corpus, cfg.model.n_landmarks, cfg.model.n_parsing)
    return generate_synthetic_corpus(d.n_samples, d.hr_size, d.seed, scale=cfg.model.scale)


def _splits(cfg) -> tuple[Corpus, Corpus]:
    return _corpus(cfg).split(cfg.data.n_test)


def _validate(corpus: Corpus, cfg) -> None:
    n = 0
    for rec in corpus_records(corpus, cfg.model.scale, cfg.eval.area_fraction, cfg.eval.seed):
        validate_record(rec, cfg.model.scale)
        n += 1
    log.info("validated %d records", n)


def _emit(report, out_dir: Path, stem: str, csv_export: bool) -> None:
    path = report.write(out_dir, stem, csv_export)
    print(report.to_text())
    print(f"wrote {path}", file=sys.stderr)


def cmd_synth_data(args) -> int:
    corpus = generate_synthetic_corpus(args.n, args.hr_size, args.seed, out_dir=args.out, scale=args.scale)
    print(f"wrote {len(corpus)} samples to {args.out}", file=sys.stderr)
    return 0


def cmd_make_masks(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    h = w = args.size
    if args.kind == "random":
        for i in range(args.count):
            save_mask(random_block_mask(h, w, args.fraction, args.seed + i), out / f"random_{i:04d}.png")
    elif args.kind == "grid":
        for idx in range(1, args.grid ** 2 + 1):
            save_mask(grid_block_mask(h, w, args.grid, idx), out / f"grid{args.grid}_blk{idx}.png")
    else:
        for s in args.sizes:
            save_mask(center_block_mask(h, w, s), out / f"center_{s}.png")
    print(f"wrote masks to {out}", file=sys.stderr)
    return 0


def _train(cfg, args, stop_after: Optional[str]) -> Trainer:
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    train, _ = _splits(cfg)
    if getattr(args, "validate", False):
        _validate(train, cfg)
    if getattr(args, "resume", None):
        trainer = Trainer.from_checkpoint(args.resume)
    else:
        trainer = Trainer(cfg.model, cfg.train, cfg.loss)
        if getattr(args, "prior_ckpt", None):
            src = Trainer.from_checkpoint(args.prior_ckpt)
            trainer.prior.load_state_dict(src.prior.state_dict())
            trainer.steps["prior"] = cfg.train.prior_steps
            trainer.phase = "stage1"
    log_path = out / "train_log.jsonl"
    mode = "a" if getattr(args, "resume", None) else "w"
    with open(log_path, mode) as fh:
        def on_report(r):
            fh.write(r.to_json() + "\n")
        trainer.run(train, on_report, max_steps=getattr(args, "max_steps", None), stop_after=stop_after)
    ckpt = Path(args.out) if getattr(args, "out", None) else out / "checkpoint.bin"
    trainer.save_checkpoint(ckpt)
    print(f"wrote {ckpt} (phase {trainer.phase}, steps {trainer.steps})", file=sys.stderr)
    return trainer


def cmd_train_prior(args) -> int:
    cfg = _load_run_config(args)
    _train(cfg, args, stop_after="prior")
    return 0


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    trainer = _train(cfg, args, stop_after=None)
    if trainer.phase == "done":
        _, test = _splits(cfg)
        report = run_standard_eval(trainer.generator, test, cfg.model.scale,
                                   cfg.eval.area_fraction, cfg.eval.seed)
        _emit(report, cfg.output_dir(), "eval", cfg.eval.csv)
    return 0


def _checkpoint_arg(args, cfg) -> Path:
    return Path(args.ckpt) if args.ckpt else cfg.output_dir() / "checkpoint.bin"


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    gen, mcfg = load_generator(_checkpoint_arg(args, cfg))
    _, test = _splits(cfg)
    report = run_standard_eval(gen, test, mcfg.scale, cfg.eval.area_fraction, cfg.eval.seed)
    _emit(report, cfg.output_dir(), "eval", cfg.eval.csv)
    return 0


def cmd_study(args) -> int:
    cfg = _load_run_config(args)
    out = cfg.output_dir()
    _, test = _splits(cfg)
    if args.study == "ablations":
        train, test = _splits(cfg)
        report = run_ablation_study(train, test, cfg.model, cfg.train, cfg.loss,
                                    cfg.eval.area_fraction, cfg.eval.seed, log=log.info)
        _emit(report, out, "study_ablations", args.csv or cfg.eval.csv)
        return 0
    ckpt = _checkpoint_arg(args, cfg)
    gen, mcfg = load_generator(ckpt)
    scale = mcfg.scale
    if args.study == "locations":
        report = run_location_study(gen, test, scale, args.grid)
        stem = f"study_locations_grid{args.grid}"
    elif args.study == "sizes":
        sizes = args.sizes if args.sizes is not None else cfg.eval.sizes
        report = run_size_study(gen, test, scale, sizes)
        stem = "study_sizes"
    elif args.study == "baselines":
        trainer = Trainer.from_checkpoint(ckpt)
        report = run_baseline_comparison(trainer.generator, trainer.fc_stage1, trainer.sr_only, test, scale,
                                         cfg.eval.area_fraction, cfg.eval.seed)
        stem = "study_baselines"
    else:
        if args.foreign or cfg.data.foreign:
            foreign = load_corpus(args.foreign or cfg.data.foreign, mcfg.n_landmarks, mcfg.n_parsing)
        else:
            foreign = generate_synthetic_corpus(cfg.data.n_test, cfg.data.hr_size, cfg.data.foreign_seed,
                                                scale=scale)
        report = run_cross_dataset(gen, foreign, scale, test.hr_size // scale,
                                   cfg.eval.area_fraction, cfg.eval.seed)
        stem = "study_cross"
    _emit(report, out, stem, args.csv or cfg.eval.csv)
    return 0


def cmd_recover(args) -> int:
    gen, mcfg = load_generator(args.ckpt)
    img = load_image(args.image)
    if img.shape[0] != mcfg.channels:
        img = img.expand(mcfg.channels, -1, -1) if img.shape[0] == 1 else img.mean(0, keepdim=True)
    mask = load_mask(args.mask, size=tuple(img.shape[-2:]))
    x = img.unsqueeze(0) * mask
    with torch.no_grad():
        _, _, hr = gen(x, mask[None, None])
    save_image(hr[0], args.out)
    print(f"wrote {args.out} ({hr.shape[-2]}x{hr.shape[-1]})", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jointsr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="generate the synthetic face-like corpus")
    s.add_argument("--n", type=int, default=500)
    s.add_argument("--hr-size", type=int, default=64)
    s.add_argument("--scale", type=int, default=4)
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("make-masks", help="write occlusion masks as PNG")
    s.add_argument("--size", type=int, required=True, help="mask side length in pixels")
    s.add_argument("--kind", choices=("random", "grid", "center"), default="random")
    s.add_argument("--fraction", type=float, default=0.25)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--grid", type=int, choices=(2, 3), default=2)
    s.add_argument("--sizes", type=_int_list, default=[4])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_make_masks)

    for name, fn, hlp in (("train-prior", cmd_train_prior, "pre-train the face-prior network"),
                          ("train", cmd_train, "run the full training schedule")):
        s = sub.add_parser(name, help=hlp)
        s.add_argument("--config")
        s.add_argument("--seed", type=int)
        s.add_argument("--resume", help="continue from a checkpoint")
        s.add_argument("--max-steps", type=int, help="stop after this many optimizer steps")
        s.add_argument("--out", help="checkpoint path (default: <output.dir>/checkpoint.bin)")
        s.add_argument("--validate", action="store_true", help="check every record's invariants first")
        if name == "train":
            s.add_argument("--prior-ckpt", help="take the face-prior net from this checkpoint")
        s.set_defaults(func=fn)

    s = sub.add_parser("eval", help="standard held-out evaluation")
    s.add_argument("--config")
    s.add_argument("--ckpt")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("study", help="run an evaluation study")
    s.add_argument("study", choices=("locations", "sizes", "baselines", "cross", "ablations"))
    s.add_argument("--config")
    s.add_argument("--ckpt")
    s.add_argument("--grid", type=int, choices=(2, 3), default=2)
    s.add_argument("--sizes", type=_int_list)
    s.add_argument("--foreign", help="directory of the foreign corpus")
    s.add_argument("--csv", action="store_true", help="also write a CSV table")
    s.set_defaults(func=cmd_study)

    s = sub.add_parser("recover", help="complete and upscale one image given its mask")
    s.add_argument("image")
    s.add_argument("mask")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_recover)
    return p


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (config_mod.ConfigError, ContainerError, ImageIOError, TrainingError, ValueError) as exc:
        print(f"jointsr: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
