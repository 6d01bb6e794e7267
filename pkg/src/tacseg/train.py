"""SGD training, learning-rate schedules, evaluation and run configuration."""

from __future__ import annotations

import configparser
import csv
import json
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import data as dataset
from .backbone import BackboneConfig
from .errors import ConfigError
from .metrics import DatasetScore, InstanceMaskSet, dataset_miou, masks_from_logits
from .model import (FUSION_PREFIXES, ModelVariant, bce_loss, forward, init_params, load_checkpoint,
                    predict_logits, save_checkpoint, zero_fusion_path)
from .rng import stream
from .tokens import TokenConfig

log = logging.getLogger(__name__)

Params = Dict[str, np.ndarray]


class TrainingDiverged(RuntimeError):
    pass


# ----------------------------------------------------------------------------
# schedules
# ----------------------------------------------------------------------------

def cosine_lr(base: float, t: int, total: int) -> float:
    """``base * 0.5 * (1 + cos(pi * t / total))``; ``base`` at t=0 and 0 at t=total."""
    if total <= 0:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * min(t, total) / total))


def step_lr(base: float, t: int, factor: float, interval: int) -> float:
    return base * factor ** (t // interval)


# ----------------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------------

@dataclass
class RunConfig:
    kind: str = "fused"
    seed: int = 7
    epochs: int = 30
    batch_size: int = 1
    lr: float = 1e-3
    schedule: str = "cosine"
    step_factor: float = 0.1
    step_interval: int = 100
    warmup_steps: int = 0
    augment: bool = True
    # data
    train_dir: str = ""
    eval_dir: str = ""
    n_train: int = 32
    n_eval: int = 8
    height: int = 64
    width: int = 64
    cells_min: int = 2
    cells_max: int = 5
    # model
    depth: int = 5
    stage_channels: Tuple[int, ...] = (8, 16, 32, 64, 128)
    embed_dim: int = 32
    patch_size: int = 8
    heads: int = 4
    mlp_ratio: int = 2
    # compare
    ablation: bool = False

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if self.epochs < 1:
            raise ConfigError(f"epochs must be positive, got {self.epochs}")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.schedule not in ("cosine", "step"):
            raise ConfigError(f"unknown lr schedule {self.schedule!r}; choose cosine or step")
        if self.step_interval < 1:
            raise ConfigError("step_interval must be positive")

    def variant(self, kind: Optional[str] = None) -> ModelVariant:
        backbone = BackboneConfig(self.depth, self.stage_channels, self.embed_dim, 3)
        tokens = TokenConfig(self.patch_size, self.embed_dim, self.depth, self.heads, self.mlp_ratio, 3)
        return ModelVariant(kind or self.kind, (self.height, self.width), backbone, tokens)

    def lr_at(self, t: int, total: int) -> float:
        if self.schedule == "cosine":
            lr = cosine_lr(self.lr, t, total)
        else:
            lr = step_lr(self.lr, t, self.step_factor, self.step_interval)
        if self.warmup_steps and t < self.warmup_steps:
            lr *= (t + 1) / self.warmup_steps
        return lr


_SECTIONS = {
    "run": ("kind", "seed", "epochs", "batch_size", "lr", "schedule", "step_factor", "step_interval",
            "warmup_steps", "augment", "ablation"),
    "data": ("train_dir", "eval_dir", "n_train", "n_eval", "height", "width", "cells_min", "cells_max"),
    "model": ("depth", "stage_channels", "embed_dim", "patch_size", "heads", "mlp_ratio"),
}


def _coerce(name: str, raw: str):
    default = {f.name: f.default for f in fields(RunConfig)}[name]
    try:
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.replace(" ", "").split(",") if x)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc
    return raw.strip()


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Read an INI-style ``key = value`` file with [run], [data] and [model] sections."""
    values = {}
    if path:
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise ConfigError(f"cannot read config file {path}")
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, raw in parser.items(section):
                if key not in _SECTIONS[section]:
                    raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
                values[key] = _coerce(key, raw)
    for key, val in (overrides or {}).items():
        if val is not None:
            values[key] = val
    return RunConfig(**values)


def dump_config(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser()
    for section, keys in _SECTIONS.items():
        parser[section] = {}
        for key in keys:
            val = getattr(cfg, key)
            parser[section][key] = ",".join(map(str, val)) if isinstance(val, tuple) else str(val)
    lines = []
    for section in parser.sections():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in parser[section].items())
        lines.append("")
    return "\n".join(lines)


# ----------------------------------------------------------------------------
# data
# ----------------------------------------------------------------------------

def load_splits(cfg: RunConfig) -> Tuple[List[dataset.SyntheticSample], List[dataset.SyntheticSample]]:
    if cfg.train_dir:
        train = dataset.read_dataset(cfg.train_dir)
    else:
        train = dataset.gen_synthetic(cfg.seed, cfg.n_train, cfg.height, cfg.width,
                                      (cfg.cells_min, cfg.cells_max), "train")
    if cfg.eval_dir:
        held_out = dataset.read_dataset(cfg.eval_dir)
    else:
        held_out = dataset.gen_synthetic(cfg.seed, cfg.n_eval, cfg.height, cfg.width,
                                         (cfg.cells_min, cfg.cells_max), "eval")
    return train, held_out


# ----------------------------------------------------------------------------
# training
# ----------------------------------------------------------------------------

@dataclass
class TrainResult:
    variant: ModelVariant
    params: Params
    log: List[dict] = field(default_factory=list)
    score: Optional[DatasetScore] = None


def first_nonfinite(params: Params, grads: Optional[Params] = None) -> str:
    for name in sorted(params):
        if not np.all(np.isfinite(params[name])):
            return f"parameter {name}"
    for name in sorted(grads or {}):
        if not np.all(np.isfinite(grads[name])):
            return f"gradient of {name}"
    return "no parameter (loss became non-finite from finite values)"


def sgd_step(params: Params, grads: Params, lr: float, frozen: Sequence[str] = ()) -> None:
    for name, g in grads.items():
        if frozen and name.startswith(tuple(frozen)):
            continue
        params[name] = params[name] - lr * g


def train(cfg: RunConfig, variant: ModelVariant, samples: Sequence[dataset.SyntheticSample],
          params: Optional[Params] = None, frozen: Sequence[str] = (), start_epoch: int = 0,
          on_epoch=None) -> TrainResult:
    """Plain SGD, one image at a time (gradients averaged over ``batch_size`` images).

    Data order and flips come from per-epoch streams keyed by ``cfg.seed``, so
    every variant trained with one config sees the same sequence of images.
    """
    if not samples:
        raise ConfigError("training set is empty")
    for s in samples:
        variant.check_image(s.image.shape)
    params = dict(params) if params is not None else init_params(variant, cfg.seed)
    n = len(samples)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    history = []
    for epoch in range(start_epoch, cfg.epochs):
        order = stream(cfg.seed, "order", epoch).permutation(n)
        losses = []
        for b in range(steps_per_epoch):
            t = epoch * steps_per_epoch + b
            batch = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            acc: Params = {}
            for idx in batch:
                sample = samples[int(idx)]
                if cfg.augment:
                    sample = dataset.augment_flip(sample, stream(cfg.seed, "augment", epoch, int(idx)))
                g = ad.Graph()
                loss = bce_loss(forward(variant, sample.image, params, g), sample.foreground())
                value = float(loss.value)
                grads = ad.backward(g, loss)
                if not math.isfinite(value):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} step {t}; first offender: "
                        f"{first_nonfinite(params, grads)}")
                losses.append(value)
                for k, v in grads.items():
                    acc[k] = acc[k] + v if k in acc else v
            if len(batch) > 1:
                acc = {k: v / len(batch) for k, v in acc.items()}
            sgd_step(params, acc, cfg.lr_at(t, total), frozen)
            # dead activations can hide overflowed weights from the loss
            bad = next((k for k in sorted(acc) if not np.all(np.isfinite(params[k]))), None)
            if bad is not None:
                raise TrainingDiverged(f"parameter {bad} became non-finite at epoch {epoch} step {t}")
        row = {"epoch": epoch, "step": (epoch + 1) * steps_per_epoch,
               "lr": cfg.lr_at((epoch + 1) * steps_per_epoch - 1, total), "loss": float(np.mean(losses))}
        history.append(row)
        log.info("%s epoch %d loss %.6f", variant.kind, epoch, row["loss"])
        if on_epoch is not None:
            on_epoch(epoch, params, row)
    return TrainResult(variant, params, history)


def predict_instances(variant: ModelVariant, params: Params, sample: dataset.SyntheticSample) -> InstanceMaskSet:
    return masks_from_logits(predict_logits(variant, sample.image, params), image_id=sample.image_id)


def evaluate(variant: ModelVariant, params: Params, samples: Iterable[dataset.SyntheticSample],
             predictions: Optional[list] = None) -> DatasetScore:
    pairs = []
    for s in samples:
        variant.check_image(s.image.shape)
        pred = predict_instances(variant, params, s)
        if predictions is not None:
            predictions.append(pred)
        pairs.append((pred, s.instances))
    return dataset_miou(pairs)


# ----------------------------------------------------------------------------
# run directories
# ----------------------------------------------------------------------------

def write_log(path: Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "step", "lr", "loss"])
        for r in rows:
            w.writerow([r["epoch"], r["step"], repr(r["lr"]), repr(r["loss"])])


def read_log(path: Path) -> List[dict]:
    with open(path, newline="") as fh:
        return [{"epoch": int(r["epoch"]), "step": int(r["step"]), "lr": float(r["lr"]), "loss": float(r["loss"])}
                for r in csv.DictReader(fh)]


def run_training(cfg: RunConfig, out_dir: Path, kind: Optional[str] = None, ablation: bool = False,
                 resume: bool = False, samples=None, save_state: bool = True) -> TrainResult:
    """Train one variant into ``out_dir`` and score it on the held-out split.

    Writes ``config.ini``, ``train_log.csv``, ``checkpoint/``, ``metrics.json``
    and, with ``save_state``, ``state/`` (the latest epoch, for ``--resume``).
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.ini").write_text(dump_config(cfg))
    except OSError as exc:
        raise OSError(f"cannot write to output directory {out_dir}: {exc}") from exc
    variant = cfg.variant("fused" if ablation else kind)
    train_set, held_out = samples if samples is not None else load_splits(cfg)

    params, frozen, start, history = None, (), 0, []
    if ablation:
        params = zero_fusion_path(init_params(variant, cfg.seed))
        frozen = FUSION_PREFIXES
    state_dir = out_dir / "state"
    if resume and (state_dir / "manifest.json").exists():
        saved_variant, params, extra = load_checkpoint(state_dir)
        if saved_variant != variant:
            raise ConfigError(f"{state_dir}: saved state is for a different model configuration")
        start = int(extra["epochs_done"])
        history = read_log(out_dir / "train_log.csv")[:start]

    def checkpoint_epoch(epoch, p, row):
        history.append(row)
        if save_state:
            save_checkpoint(state_dir, variant, p, extra={"epochs_done": epoch + 1})
        write_log(out_dir / "train_log.csv", history)

    result = train(cfg, variant, train_set, params, frozen, start, checkpoint_epoch)
    result.log = history
    result.score = evaluate(variant, result.params, held_out)
    label = "ablation" if ablation else variant.kind
    save_checkpoint(out_dir / "checkpoint", variant, result.params, extra={"label": label})
    metrics = {"label": label, "kind": variant.kind, "miou": result.score.miou,
               "n_images": result.score.n_images, "n_excluded": result.score.n_excluded,
               "n_unmatched_pred": result.score.n_unmatched_pred,
               "final_loss": history[-1]["loss"] if history else None}
    (out_dir / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return result
