"""Command-line entry point: ``tacseg {train,eval,gradcheck,gen-data,compare}``.

Exit status: 0 on success, 1 when a validation (gradient check, training
divergence) fails, 2 on configuration or I/O errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional

from . import data as dataset
from . import gradcheck as gc
from .errors import ConfigError, DimensionError
from .model import load_checkpoint
from .report import plot_compare, plot_predictions, write_report
from .train import TrainingDiverged, evaluate, load_config, load_splits, run_training

log = logging.getLogger("tacseg")

EXIT_OK, EXIT_VALIDATION, EXIT_CONFIG = 0, 1, 2


def _overrides(args) -> dict:
    keys = ("seed", "epochs", "lr", "schedule", "batch_size", "train_dir", "eval_dir", "kind")
    return {k: getattr(args, k, None) for k in keys}


def _score_row(label: str, score) -> dict:
    return {"variant": label, "miou": score.miou, "n_images": score.n_images,
            "n_excluded": score.n_excluded, "n_unmatched_pred": score.n_unmatched_pred}


def cmd_train(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    result = run_training(cfg, Path(args.out), resume=args.resume)
    print(f"{result.variant.kind}: final loss {result.log[-1]['loss']:.6f}, "
          f"held-out mIoU {result.score.miou:.4f} ({result.score.n_images} images)")
    return EXIT_OK


def cmd_eval(args) -> int:
    variant, params, extra = load_checkpoint(args.checkpoint)
    samples = dataset.read_dataset(args.data)
    predictions: list = []
    score = evaluate(variant, params, samples, predictions)
    label = extra.get("label", variant.kind)
    out = Path(args.out)
    paths = write_report([_score_row(label, score)], out, stem="report", title=f"mIoU on {args.data}")
    if args.figure:
        plot_predictions(samples, predictions, out / "predictions.png")
    print(paths["txt"].read_text(), end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    scopes = gc.SCOPES if args.scope == "all" else (args.scope,)
    seeds = range(args.seed, args.seed + args.seeds)
    failed = False
    start = time.perf_counter()
    for scope in scopes:
        for r in sorted(gc.summarize(gc.run(scope, seeds)), key=lambda r: (r.case, r.group)):
            status = "PASS" if r.passed else "FAIL"
            failed |= not r.passed
            print(f"{status} {r.scope:8s} {r.case:20s} {r.group:18s} max_rel_err={r.max_rel_err:.3e}")
    verdict = "FAIL" if failed else "PASS"
    print(f"{verdict}: {len(seeds)} seeds per scope, tolerance {gc.TOLERANCE:g}, "
          f"{time.perf_counter() - start:.1f} s")
    return EXIT_VALIDATION if failed else EXIT_OK


def cmd_gen_data(args) -> int:
    samples = dataset.gen_synthetic(args.seed, args.n, args.height, args.width,
                                    (args.cells_min, args.cells_max), args.split)
    meta = {"seed": args.seed, "height": args.height, "width": args.width,
            "cells": [args.cells_min, args.cells_max]}
    path = dataset.write_dataset(samples, args.out, args.split, meta, force=args.force)
    print(f"wrote {len(samples)} images to {path}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    ablation = args.ablation or cfg.ablation
    out = Path(args.out)
    splits = load_splits(cfg)
    runs = [("vanilla", False), ("fused", False)] + ([("ablation", True)] if ablation else [])
    rows, logs = [], {}
    for label, abl in runs:
        kind = "fused" if abl else label
        log.info("training %s", label)
        # no --resume here, so skip the per-epoch state snapshots
        result = run_training(cfg, out / label, kind=kind, ablation=abl, samples=splits, save_state=False)
        rows.append(_score_row(label, result.score))
        logs[label] = result.log
    paths = write_report(rows, out, stem="compare", title="Held-out mIoU, vanilla vs transformer-assisted",
                         reference=True)
    plot_compare(logs, rows, out / "compare.png")
    (out / "compare.json").write_text(json.dumps(
        {"rows": rows, "fused_minus_vanilla": rows[1]["miou"] - rows[0]["miou"]}, indent=2, sort_keys=True) + "\n")
    print(paths["txt"].read_text(), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tacseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_flags(p):
        p.add_argument("--config", help="INI file with [run], [data] and [model] sections")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True)
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--schedule", choices=("cosine", "step"))
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--train-dir", dest="train_dir")
        p.add_argument("--eval-dir", dest="eval_dir")

    p = sub.add_parser("train", help="train one model variant")
    run_flags(p)
    p.add_argument("--variant", dest="kind", choices=("vanilla", "fused"))
    p.add_argument("--resume", action="store_true", help="continue from <out>/state if present")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="split directory written by gen-data")
    p.add_argument("--out", required=True)
    p.add_argument("--figure", action="store_true", help="also write predictions.png")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--scope", choices=gc.SCOPES + ("all",), default="all")
    p.add_argument("--seeds", type=int, default=5, help="number of random seeds per scope")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gen-data", help="write a synthetic cell dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--split", default="train")
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--cells-min", type=int, default=2)
    p.add_argument("--cells-max", type=int, default=5)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty split directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("compare", help="train vanilla and fused variants and tabulate mIoU")
    run_flags(p)
    p.add_argument("--ablation", action="store_true", help="add a fused run with the fusion path frozen at zero")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ConfigError, DimensionError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
