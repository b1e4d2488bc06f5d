"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 I/O or data error,
4 training divergence, 5 checkpoint error, 6 gradient check failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .checkpoint import load_checkpoint, make_checkpoint, restore_model, save_checkpoint
from .config import RunConfig, load_config
from .data import (
    atomic_write_text,
    load_manifest,
    preprocess_eval,
    read_image,
    stratified_split,
    write_splits,
)
from .errors import CheckpointError, ConfigError, DataError, DivergenceError
from .gradcheck import SUITE_TOLERANCE, run_suite
from .metrics import ConfusionMatrix, evaluate_predictions
from .models import predict
from .tensor import Tensor, no_grad
from .training import predict_dataset, train

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_CHECKPOINT, EXIT_GRADCHECK = 0, 2, 3, 4, 5, 6

def thread_limits(deterministic: bool):
    """Pin BLAS to one thread in deterministic mode, else honour DERM_THREADS."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()
    if deterministic:
        return threadpool_limits(limits=1)
    cap = os.environ.get("DERM_THREADS")
    return threadpool_limits(limits=int(cap)) if cap else contextlib.nullcontext()


def _parse_ratios(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise ConfigError(f"--ratios must be three comma-separated numbers, got {text!r}") from None
    if len(parts) != 3:
        raise ConfigError(f"--ratios needs exactly three values, got {len(parts)}")
    return parts


def cmd_split(args) -> int:
    ratios = _parse_ratios(args.ratios)
    manifest = Path(args.manifest)
    root = Path(args.data_root) if args.data_root else manifest.parent
    dataset = load_manifest(manifest, root, check_files=False)
    splits = stratified_split(dataset, ratios, args.seed)
    write_splits(dataset, splits, args.out_dir)
    print(f"train={len(splits.train)} val={len(splits.val)} test={len(splits.test)} -> {args.out_dir}")
    return EXIT_OK


def _split_paths(cfg: RunConfig) -> dict[str, Path]:
    if not cfg.data.split_dir:
        raise ConfigError("[data] split_dir must name the directory holding train.csv, val.csv and test.csv")
    split_dir = cfg.resolve(cfg.data.split_dir)
    return {name: split_dir / f"{name}.csv" for name in ("train", "val", "test")}


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = cfg.resolve(cfg.data.data_root)
    sets = {name: load_manifest(path, root) for name, path in _split_paths(cfg).items()}
    with thread_limits(cfg.train.deterministic):
        result = train(
            cfg.model,
            sets["train"],
            sets["val"],
            cfg.train,
            augmentation=cfg.augment if cfg.augment.enabled else None,
        )
        lines = [json.dumps(rec.as_dict()) for rec in result.log]
        atomic_write_text(out_dir / "log.jsonl", "\n".join(lines) + "\n")
        ckpt = make_checkpoint(
            result.model,
            result.optimizer,
            epoch=result.best_epoch,
            best_val_f1=result.best_val_f1,
            extra={"train": vars(cfg.train)},
        )
        save_checkpoint(ckpt, out_dir / "best.ckpt")
        logits, labels = predict_dataset(result.model, sets["test"], cfg.model.image_size, cfg.train.batch_size)
        pred, prob = predict(logits)
        report = evaluate_predictions(labels, pred, prob)
    atomic_write_text(out_dir / "metrics.json", report.to_json())
    print(
        f"best epoch {result.best_epoch} val_f1={result.best_val_f1:.4f}; "
        f"test accuracy={report.accuracy:.4f} weighted_f1={report.weighted_f1:.4f} -> {out_dir}"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = restore_model(ckpt)
    dataset = load_manifest(args.manifest, args.data_root)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with thread_limits(True):
        logits, labels = predict_dataset(model, dataset, model.config.image_size, args.batch_size)
    pred, prob = predict(logits)
    report = evaluate_predictions(labels, pred, prob)
    atomic_write_text(out_dir / "metrics.json", report.to_json())
    atomic_write_text(out_dir / "confusion.csv", ConfusionMatrix(**report.confusion).to_csv())
    auc = "n/a" if report.auc_roc is None else f"{report.auc_roc:.4f}"
    print(f"accuracy={report.accuracy:.4f} weighted_f1={report.weighted_f1:.4f} auc={auc} -> {out_dir}")
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = restore_model(ckpt)
    pixels = read_image(args.image)
    x = preprocess_eval(pixels, model.config.image_size)[None]
    with no_grad():
        logit = model(Tensor(x), mode="eval").data
    label, prob = predict(logit)
    print(f"{'malignant' if label[0] == 1 else 'non-malignant'} {prob[0]:.6f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.config:
        load_config(args.config)
    rows = run_suite(seed=args.seed)
    width = max(len(name) for name, _ in rows)
    failed = []
    print(f"{'layer':<{width}}  max_rel_error  status")
    for name, err in rows:
        ok = err < SUITE_TOLERANCE
        if not ok:
            failed.append(name)
        print(f"{name:<{width}}  {err:.3e}      {'ok' if ok else 'FAIL'}")
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dermhybrid", description="Hybrid CNN-Transformer skin lesion classifiers")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="stratified train/val/test split of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ratios", default="0.8,0.1,0.1")
    p.add_argument("--data-root", default=None, help="image root (defaults to the manifest's directory)")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--data-root", required=True)
    p.add_argument("--out-dir", default=".")
    p.add_argument("--batch-size", type=int, default=32)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="classify one PPM image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer and both models")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, DataError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
