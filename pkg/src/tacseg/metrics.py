"""Instance masks, IoU / mIoU scoring and connected-component instance recovery."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, List, NamedTuple, Optional

import numpy as np
from scipy import ndimage

from .errors import DimensionError

MIN_AREA = 8
# 4-connectivity: edge neighbours only
FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass
class InstanceMaskSet:
    """Binary masks over one image, one per instance."""

    masks: List[np.ndarray]
    image_id: str = ""
    shape: Optional[tuple] = field(default=None)

    def __post_init__(self):
        self.masks = [np.asarray(m, dtype=bool) for m in self.masks]
        if self.masks:
            ref = self.masks[0].shape
            if self.shape is not None and tuple(self.shape) != ref:
                raise DimensionError(f"masks are {ref}, declared shape {self.shape}")
            self.shape = ref
        for k, m in enumerate(self.masks):
            if m.ndim != 2 or m.shape != self.shape:
                raise DimensionError(f"instance {k} has shape {m.shape}, expected {self.shape}")
            if not m.any():
                raise ValueError(f"instance {k} of image {self.image_id!r} is empty")

    def __len__(self) -> int:
        return len(self.masks)

    def union(self) -> np.ndarray:
        if not self.masks:
            return np.zeros(self.shape or (0, 0), dtype=bool)
        return np.logical_or.reduce(self.masks)

    def stack(self) -> np.ndarray:
        return np.stack(self.masks) if self.masks else np.zeros((0,) + tuple(self.shape or (0, 0)), bool)


def iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DimensionError(f"iou: mask shapes {a.shape} and {b.shape} differ")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def iou_matrix(pred: InstanceMaskSet, gt: InstanceMaskSet) -> np.ndarray:
    """``[n_gt, n_pred]`` IoU table."""
    if pred.masks and gt.masks and pred.shape != gt.shape:
        raise DimensionError(f"miou: prediction shape {pred.shape} and ground truth {gt.shape} differ")
    G = gt.stack().reshape(len(gt), -1).astype(np.int64)
    P = pred.stack().reshape(len(pred), -1).astype(np.int64)
    inter = G @ P.T
    union = G.sum(1)[:, None] + P.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.maximum(union, 1), 0.0)


class ImageScore(NamedTuple):
    miou: Optional[float]   # None when the image has no ground-truth instances
    n_gt: int
    n_pred: int
    n_unmatched_pred: int


def score_image(pred: InstanceMaskSet, gt: InstanceMaskSet) -> ImageScore:
    """Mean over GT instances of the best IoU with any prediction.

    A prediction counts as unmatched when it is not the best match (with
    nonzero IoU) of any GT instance.
    """
    if len(gt) == 0:
        return ImageScore(None, 0, len(pred), len(pred))
    if len(pred) == 0:
        return ImageScore(0.0, len(gt), 0, 0)
    table = iou_matrix(pred, gt)
    best = table.max(axis=1)
    matched = {int(j) for j, v in zip(table.argmax(axis=1), best) if v > 0}
    return ImageScore(float(best.mean()), len(gt), len(pred), len(pred) - len(matched))


def miou(pred: InstanceMaskSet, gt: InstanceMaskSet) -> float:
    """Per-image mIoU; raises ``ValueError`` for an image without GT instances."""
    s = score_image(pred, gt)
    if s.miou is None:
        raise ValueError(f"image {gt.image_id!r} has no ground-truth instances; mIoU undefined")
    return s.miou


class DatasetScore(NamedTuple):
    miou: float
    n_images: int
    n_excluded: int
    n_unmatched_pred: int


def dataset_miou(pairs: Iterable[tuple]) -> DatasetScore:
    """Average per-image mIoU over ``(pred, gt)`` pairs, skipping images with no GT."""
    scores, excluded, unmatched = [], 0, 0
    for pred, gt in pairs:
        s = score_image(pred, gt)
        unmatched += s.n_unmatched_pred
        if s.miou is None:
            excluded += 1
        else:
            scores.append(s.miou)
    value = float(np.mean(scores)) if scores else 0.0
    return DatasetScore(value, len(scores), excluded, unmatched)


def connected_components(mask, min_area: int = MIN_AREA, image_id: str = "") -> InstanceMaskSet:
    """Split a binary mask into 4-connected instances, dropping those under ``min_area`` pixels."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise DimensionError(f"connected_components: expected a 2-D mask, got {mask.shape}")
    labels, n = ndimage.label(mask, structure=FOUR_CONNECTED)
    if n == 0:
        return InstanceMaskSet([], image_id, mask.shape)
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    keep = [k for k in range(1, n + 1) if areas[k] >= min_area]
    return InstanceMaskSet([labels == k for k in keep], image_id, mask.shape)


def masks_from_logits(logits: np.ndarray, threshold: float = 0.5, min_area: int = MIN_AREA,
                      image_id: str = "") -> InstanceMaskSet:
    """Sigmoid > threshold, then connected components. Works on logits directly."""
    z = np.asarray(logits).reshape(np.asarray(logits).shape[-2:])
    logit_threshold = np.log(threshold / (1.0 - threshold))
    return connected_components(z > logit_threshold, min_area, image_id)

