"""Command-line entry point: synth, train, propagate, eval, gradcheck."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from .config import RunConfig, load_config
from .data import load_frames, load_mask, save_mask, scan_dataset, scan_masks
from .encoder import init_params
from .errors import DataError, SelfVOSError
from .gradcheck import TOLERANCE, run_suite
from .metrics import evaluate_dataset
from .propagation import PropagationConfig, propagate_video
from .synth import synth_generate
from .trainer import Trainer, load_checkpoint, load_training_clips, params_from_checkpoint

log = logging.getLogger("selfvos")


def _run_config(args) -> RunConfig:
    return load_config(args.config) if getattr(args, "config", None) else RunConfig.desk()


def cmd_synth(args) -> int:
    cfg = _run_config(args).synth
    if args.clips is not None:
        cfg = replace(cfg, clips=args.clips, val_clips=min(cfg.val_clips, max(0, args.clips - 2)))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = synth_generate(cfg, args.out)
    print(f"wrote {cfg.clips} clips x {cfg.frames} frames to {out}")
    return 0


def cmd_train(args) -> int:
    run = _run_config(args)
    overrides = {k: v for k, v in (("max_steps", args.steps), ("seed", args.seed), ("lr", args.lr)) if v is not None}
    train_cfg = replace(run.train, **overrides)
    index = scan_dataset(args.data)
    split = args.split if args.split else ("train" if "train" in index.splits else None)
    _, clips = load_training_clips(index, split, train_cfg.crop_size, train_cfg.frames_per_clip)
    if args.resume:
        trainer = Trainer.resume(load_checkpoint(args.resume), clips)
        # max_steps counts from the start of the run, so --steps on resume is a total
        trainer.config = replace(trainer.config, **overrides)
    else:
        trainer = Trainer(clips, run.encoder, train_cfg, run.loss)
    total = trainer.total_steps()
    log.info("training on %d clips for %d steps", len(clips), total)
    t0 = time.time()
    for report in trainer.run():
        if report["step"] % args.log_every == 0 or report["step"] == total:
            log.info("step %d  l_cv %.4f  l_st %.4f  total %.4f  (%.1fs)", report["step"], report["l_cv"],
                     report["l_st"], report["total"], time.time() - t0)
    trainer.save(args.out)
    print(f"saved checkpoint to {args.out} after {trainer.step} steps")
    return 0


def cmd_propagate(args) -> int:
    run = _run_config(args)
    if args.ckpt:
        params, enc = params_from_checkpoint(load_checkpoint(args.ckpt))
    elif args.random_init:
        enc = run.encoder
        params = init_params(enc, seed=args.seed)
    else:
        raise DataError("propagate needs --ckpt (or --random-init for a baseline)")
    pcfg = run.propagation
    if args.k is not None or args.radius is not None:
        pcfg = PropagationConfig(k=args.k or pcfg.k, radius=pcfg.radius if args.radius is None else args.radius,
                                 temperature=pcfg.temperature, capacity=pcfg.capacity)
    index = scan_dataset(args.data)
    out = Path(args.out)
    for rec in index.subset(args.split):
        first = rec.mask_for(0)
        if first is None:
            raise DataError(f"clip {rec.clip_id} has no mask for its first frame")
        result = propagate_video(load_frames(rec), load_mask(first), params, enc, pcfg, clip_id=rec.clip_id)
        for path, labels in zip(rec.frames, result.labels):
            save_mask(out / "Masks" / rec.clip_id / (path.stem + ".png"), labels)
        log.info("propagated %s (%d frames)", rec.clip_id, len(rec))
    print(f"wrote masks to {out / 'Masks'}")
    return 0


def _gt_sequences(root, split):
    root = Path(root)
    seqs = {}
    if (root / "Frames").is_dir():
        index = scan_dataset(root)
        for rec in index.subset(split):
            if rec.masks:
                seqs[rec.clip_id] = [rec.masks.get(n) for n in rec.frame_numbers]
    else:
        for clip, masks in scan_masks(root).items():
            seqs[clip] = [masks[n] for n in sorted(masks)]
    return seqs


def cmd_eval(args) -> int:
    gt_paths = _gt_sequences(args.gt, args.split)
    pred_masks = scan_masks(args.pred)
    preds, gts = {}, {}
    for clip, paths in gt_paths.items():
        gts[clip] = [load_mask(p) if p is not None else None for p in paths]
        if clip not in pred_masks:
            continue
        by_stem = {p.stem: p for p in pred_masks[clip].values()}
        preds[clip] = [load_mask(by_stem[p.stem]) if p is not None and p.stem in by_stem else None for p in paths]
    report = evaluate_dataset(preds, gts, threshold=args.threshold, tol_fraction=args.boundary_tol)
    print(report.table(), end="")
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(report.to_json())
        Path(args.report).with_suffix(".txt").write_text(report.table())
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(range(args.seeds), args.tolerance)
    worst = {}
    for name, _, err in results:
        worst[name] = max(err, worst.get(name, 0.0))
    failed = 0
    for name, err in sorted(worst.items()):
        ok = err < args.tolerance
        failed += not ok
        print(f"{'ok  ' if ok else 'FAIL'} {name:<20} max rel err {err:.2e}")
    print(f"{len(worst) - failed}/{len(worst)} cases within {args.tolerance:g} over {args.seeds} seeds")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selfvos", description="Self-supervised video object segmentation")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic moving-shape dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--clips", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="self-supervised training")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--split", help="split name from splits.json (default: train when defined)")
    p.add_argument("--steps", type=int, help="override max_steps")
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("propagate", help="propagate each clip's first-frame mask")
    p.add_argument("--config")
    p.add_argument("--ckpt")
    p.add_argument("--random-init", action="store_true", help="use an untrained encoder")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split")
    p.add_argument("--k", type=int)
    p.add_argument("--radius", type=int)
    p.set_defaults(func=cmd_propagate)

    p = sub.add_parser("eval", help="score predicted masks against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--split")
    p.add_argument("--report", help="write the report as JSON here (and a .txt table beside it)")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--boundary-tol", type=float, default=0.008)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite (float64)")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--tolerance", type=float, default=TOLERANCE)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (SelfVOSError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
