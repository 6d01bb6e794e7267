"""mIoU reports (text table + CSV) and the figures that accompany them."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

CSV_COLUMNS = ("variant", "miou", "n_images", "n_excluded", "n_unmatched_pred")

# Published scores for the with/without-transformer contrast on the cell
# dataset, shown only as context; the toy harness cannot reproduce them.
REFERENCE_ROWS = (
    ("CMRCNN-X152 with Effb5", 0.9038),
    ("CMRCNN-X152 with Effb5 and Transformer", 0.9281),
    ("DRS with Effb5", 0.8793),
    ("DRS with Effb5 and Transformer", 0.9273),
)

# deterministic PNG bytes
_PNG_META = {"Software": None}


def csv_text(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([r["variant"], repr(float(r["miou"])), r["n_images"], r["n_excluded"], r["n_unmatched_pred"]])
    return buf.getvalue()


def read_csv(path) -> List[dict]:
    with open(path, newline="") as fh:
        out = []
        for r in csv.DictReader(fh):
            out.append({"variant": r["variant"], "miou": float(r["miou"]), "n_images": int(r["n_images"]),
                        "n_excluded": int(r["n_excluded"]), "n_unmatched_pred": int(r["n_unmatched_pred"])})
        return out


def text_table(rows: Sequence[dict], title: str = "mIoU", reference: bool = False) -> str:
    width = max([len("Model")] + [len(r["variant"]) for r in rows])
    lines = [title, f"{'Model':<{width}} | mIoU Score", f"{'-' * width}-+-----------"]
    lines += [f"{r['variant']:<{width}} | {r['miou']:.4f}" for r in rows]
    lines.append("")
    lines.append(f"images scored: {rows[0]['n_images'] if rows else 0}, "
                 f"excluded (no ground truth): {rows[0]['n_excluded'] if rows else 0}")
    if reference:
        lines.append("")
        lines.append("Reference only, NOT reproduced here (real cell data, pretrained weights, GPU scale):")
        for name, score in REFERENCE_ROWS:
            lines.append(f"  {name}: {score:.4f}")
        lines.append("  transformer-assisted minus vanilla (CMRCNN-X152, Effb5): +0.0243")
    return "\n".join(lines) + "\n"


def write_report(rows: Sequence[dict], out_dir, stem: str = "report", title: str = "mIoU",
                 reference: bool = False) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out_dir / f"{stem}.csv", "txt": out_dir / f"{stem}.txt"}
    paths["csv"].write_text(csv_text(rows))
    paths["txt"].write_text(text_table(rows, title, reference), encoding="utf-8")
    return paths


def plot_compare(logs: Dict[str, Sequence[dict]], rows: Sequence[dict], path) -> Path:
    """Training-loss curves and an mIoU bar per variant."""
    fig, (ax_loss, ax_bar) = plt.subplots(1, 2, figsize=(9, 3.4))
    for label, hist in logs.items():
        ax_loss.plot([r["epoch"] + 1 for r in hist], [r["loss"] for r in hist], label=label,
                     linestyle="--" if label == "ablation" else "-")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("mean BCE loss")
    ax_loss.set_yscale("log")
    ax_loss.legend(frameon=False)

    names = [r["variant"] for r in rows]
    vals = [r["miou"] for r in rows]
    bars = ax_bar.bar(names, vals, color=["0.55", "C3", "0.8"][: len(rows)])
    for b, v in zip(bars, vals):
        ax_bar.text(b.get_x() + b.get_width() / 2, v + 0.01, f"{v:.3f}", ha="center", va="bottom", fontsize=8)
    ax_bar.set_ylim(0, 1.05)
    ax_bar.set_ylabel("held-out mIoU")
    for ax in (ax_loss, ax_bar):
        ax.spines["top"].set_visible(False)
        ax.spines["right"].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)
    return Path(path)


def _label_image(masks) -> np.ndarray:
    lab = np.zeros(masks.shape, dtype=float) if masks.shape else np.zeros((1, 1))
    for k, m in enumerate(masks.masks, start=1):
        lab[m] = k
    return np.ma.masked_equal(lab, 0)


def plot_predictions(samples, predictions, path, limit: int = 4) -> Optional[Path]:
    """Image / ground-truth instances / predicted instances for the first few samples."""
    n = min(limit, len(samples))
    if n == 0:
        return None
    fig, axes = plt.subplots(n, 3, figsize=(6, 2 * n), squeeze=False)
    for i in range(n):
        s, pred = samples[i], predictions[i]
        axes[i, 0].imshow(s.image.transpose(1, 2, 0))
        axes[i, 1].imshow(_label_image(s.instances), cmap="tab10", interpolation="nearest")
        axes[i, 2].imshow(_label_image(pred), cmap="tab10", interpolation="nearest")
        axes[i, 0].set_ylabel(s.image_id, fontsize=8)
    for ax, title in zip(axes[0], ("image", "ground truth", "predicted")):
        ax.set_title(title, fontsize=9)
    for ax in axes.ravel():
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=90, metadata=_PNG_META)
    plt.close(fig)
    return Path(path)
