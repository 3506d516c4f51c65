"""Command-line entry point: ``udet {synth,train,eval,predict,gradcheck,params}``.

Exit status: 0 success, 1 usage error, 2 data error, 3 failed check.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data.dataset import load_dataset, load_mask, load_slice, save_sample, write_manifest
from .data.mhd import MhdError, MhdVolume, write_mhd
from .data.phantom import NoduleSpec, generate_phantom
from .data.split import split_dataset
from .metrics import MetricsLog, MetricsRecord, binarize, dsc_histogram, write_histogram_csv
from .model import VARIANTS, audit_diff, audit_parameters, build, format_audit
from .report import (DIAMETER_SPLIT_MM, overlay, stratified_table, write_aggregate_csv,
                     write_per_sample_csv, write_ppm, write_stratified_csv)
from .train import TrainConfig, cross_validate, evaluate, init_weights, predict, train_fold

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3
STAMP_NAME = "stamp.txt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def write_stamp(out: Path, command: str, seed: Optional[int], config_hash: str = "-") -> Path:
    """Seed, config digest and package version; no timestamps, so reruns match."""
    out.mkdir(parents=True, exist_ok=True)
    path = out / STAMP_NAME
    path.write_text(f"command = {command}\nseed = {seed if seed is not None else '-'}\n"
                    f"config_hash = {config_hash}\nversion = {__version__}\n")
    return path


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if not 0 <= args.attached_fraction <= 1:
        raise UsageError("--attached-fraction must lie in [0, 1]")
    samples = []
    for i in range(args.count):
        attach = bool(np.random.default_rng([args.seed, i, 1]).random() < args.attached_fraction)
        spec = NoduleSpec(count=args.nodules, radius_range=(args.min_radius, args.max_radius),
                          attach_to_wall=attach)
        s = generate_phantom(np.random.default_rng([args.seed, i]), args.size, spec, f"p{i:04d}")
        save_sample(s, out, spacing_mm=spec.spacing_mm)
        samples.append(s)
    write_manifest(out, samples)
    write_stamp(out, "synth", args.seed)
    print(f"wrote {len(samples)} phantoms to {out}")
    return EXIT_OK


def _load_config(args) -> TrainConfig:
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    overrides = {}
    for item in args.set or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    if overrides:
        text = cfg.to_text() + "".join(f"{k} = {v}\n" for k, v in overrides.items())
        cfg = TrainConfig.from_text(text)
    return cfg


def cmd_train(args) -> int:
    cfg = _load_config(args)
    samples = load_dataset(args.data)
    if not samples:
        raise ValueError(f"{args.data}: manifest lists no samples")
    if any(s.image.shape != (cfg.input_size, cfg.input_size) for s in samples):
        raise ValueError(f"config input_size {cfg.input_size} does not match the data "
                         f"({samples[0].image.shape})")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    write_stamp(out, "train", cfg.seed, cfg.digest())
    log = MetricsLog(out / "metrics.csv")
    split = split_dataset(samples, cfg.test_fraction, folds=max(args.folds, 2), seed=cfg.seed)
    if args.folds >= 2:
        res = cross_validate(split, cfg, log, checkpoint_dir=out)
        for key, (mean, std) in res.summary.items():
            print(f"{key}: {mean:.4f} +- {std:.4f}")
        return EXIT_OK
    # a single run: fit on the whole training split, monitor the held-out test split
    val = split.test or split.train
    model = build(cfg.variant, cfg.input_size, cfg.width_scale)
    init_weights(model, cfg.seed)
    res = train_fold(model, split.train, val, cfg, fold=0, log=log)
    model.load_state_dict(res.best_state)
    save_checkpoint(model, out / "model.ckpt",
                    extra={"pos_weight": res.pos_weight, "best_epoch": res.best_epoch})
    rec, _ = evaluate(model, val, res.pos_weight, cfg.eval_batch)
    print(f"best epoch {res.best_epoch}: dsc {rec.dsc:.4f} sen {rec.sen:.4f} ppv {rec.ppv:.4f}")
    return EXIT_OK


def _prediction_for(pred_dir: Path, sid: str) -> np.ndarray:
    for name in (f"{sid}_pred.mhd", f"{sid}_mask.mhd"):
        if (pred_dir / name).exists():
            return load_mask(pred_dir / name)
    raise FileNotFoundError(f"no prediction for {sid!r} in {pred_dir}")


def cmd_eval(args) -> int:
    samples = load_dataset(args.data)
    if args.pred:
        preds = [_prediction_for(Path(args.pred), s.id) for s in samples]
    else:
        model, _ = load_checkpoint(args.ckpt)
        preds = [binarize(p) for p in predict(model, np.stack([s.image for s in samples]))]
    records = []
    for s, p in zip(samples, preds):
        if p.shape != s.mask.shape:
            raise ValueError(f"{s.id}: prediction shape {p.shape} != mask shape {s.mask.shape}")
        records.append(MetricsRecord.from_masks(s.mask, p, tag=s.id))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_per_sample_csv(out / "per_sample.csv", records)
    agg = write_aggregate_csv(out / "aggregate.csv", records)
    write_histogram_csv(out / "dsc_histogram.csv", dsc_histogram(records, args.bins))
    write_stratified_csv(out / "stratified.csv",
                         stratified_table(records, [s.meta for s in samples], args.diameter_split))
    write_stamp(out, "eval", None)
    print(f"dsc {agg['dsc']:.4f} sen {agg['sen']:.4f} ppv {agg['ppv']:.4f} (n={len(records)})")
    return EXIT_OK


def cmd_predict(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    image, spacing = load_slice(args.image)
    if image.shape != (model.input_size, model.input_size):
        raise ValueError(f"{args.image}: slice is {image.shape}, model expects {model.input_size}^2")
    pred = binarize(predict(model, image[None])[0])
    gt = load_mask(args.mask) if args.mask else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    if stem.endswith("_image"):
        stem = stem[: -len("_image")]
    write_mhd(MhdVolume(pred, spacing), out / f"{stem}_pred.mhd")
    write_ppm(out / f"{stem}_overlay.ppm", overlay(image, pred, gt))
    write_stamp(out, "predict", None)
    print(f"{stem}: {int(pred.sum())} foreground pixels")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    results = run_suite(range(args.seeds), end_to_end=not args.skip_end_to_end)
    failed = 0
    for r in results:
        if not r.passed:
            failed += 1
        if args.verbose or not r.passed:
            print(f"{r.name:<24} seed {r.seed}: {r.report}")
    print(f"{len(results) - failed}/{len(results)} gradient checks passed")
    return EXIT_OK if failed == 0 else EXIT_CHECK


def cmd_params(args) -> int:
    g = build(args.variant, args.input_size, args.width_scale)
    rows = audit_parameters(g)
    diff = audit_diff(rows) if args.variant == "udet" and args.width_scale == "1" else None
    print(format_audit(rows, diff))
    if diff is not None and not all(d[-1] for d in diff):
        return EXIT_CHECK
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="udet", description="U-Det lung-nodule segmentation engine")
    p.add_argument("--version", action="version", version=f"udet {__version__}")
    p.add_argument("-q", "--quiet", action="store_true", help="only warnings on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write synthetic phantom slices with nodule masks")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=_positive, required=True)
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--nodules", type=_positive, default=1, help="nodules per slice")
    s.add_argument("--min-radius", type=float, default=4.0)
    s.add_argument("--max-radius", type=float, default=10.0)
    s.add_argument("--attached-fraction", type=float, default=0.3)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train one model or K folds")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="key = value file of TrainConfig fields")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
    t.add_argument("--out", required=True)
    t.add_argument("--folds", type=_positive, default=4, help="1 trains a single model")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="segmentation metrics against manifest masks")
    e.add_argument("--data", required=True)
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--pred", help="directory of <id>_pred.mhd (or <id>_mask.mhd) masks")
    e.add_argument("--out", required=True)
    e.add_argument("--diameter-split", type=float, default=DIAMETER_SPLIT_MM)
    e.add_argument("--bins", type=_positive, default=10)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="predict one slice; write mask and overlay")
    r.add_argument("--image", required=True)
    r.add_argument("--ckpt", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--mask", help="ground-truth mask drawn into the overlay")
    r.set_defaults(func=cmd_predict)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    gc.add_argument("--seeds", type=_positive, default=5)
    gc.add_argument("--skip-end-to-end", action="store_true")
    gc.add_argument("-v", "--verbose", action="store_true")
    gc.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("params", help="parameter audit against the published layer table")
    a.add_argument("--variant", choices=sorted(VARIANTS), default="udet")
    a.add_argument("--input-size", type=int, default=512)
    a.add_argument("--width-scale", default="1")
    a.set_defaults(func=cmd_params)
    return p


def _thread_limit():
    n = os.environ.get("UDET_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        print(f"udet: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, MhdError, CheckpointError, ValueError) as exc:
        print(f"udet {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
