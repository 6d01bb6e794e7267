"""Synthetic cell-blob images, flip augmentation and PPM/PGM dataset I/O.

Dataset layout on disk::

    <root>/<split>/dataset.json
    <root>/<split>/<image_id>/image.ppm      # P6, 8-bit RGB
    <root>/<split>/<image_id>/inst_<k>.pgm   # P5, 255 = foreground

Generated images are quantized to multiples of 1/255, so writing and reading
a sample back is lossless.
"""

from __future__ import annotations

import json
import re
import shutil
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .metrics import InstanceMaskSet
from .rng import stream

BACKGROUND = np.array([0.88, 0.74, 0.82])
CELL = np.array([0.42, 0.26, 0.58])
MIN_CONTRAST = 0.3
GAP = 2
MAX_TRIES = 200


@dataclass
class SyntheticSample:
    image: np.ndarray            # [3, H, W] in [0, 1]
    instances: InstanceMaskSet
    seed: int = 0

    @property
    def image_id(self) -> str:
        return self.instances.image_id

    def foreground(self) -> np.ndarray:
        return self.instances.union()


def _ellipse(h, w, cy, cx, ay, ax, theta) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = (dx * c + dy * s) / ax
    v = (-dx * s + dy * c) / ay
    return u * u + v * v <= 1.0


def _background(rng, h, w) -> Tuple[np.ndarray, np.ndarray]:
    base = BACKGROUND + rng.uniform(-0.04, 0.04, 3)
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    fy, fx, ph = rng.uniform(1, 4), rng.uniform(1, 4), rng.uniform(0, 2 * np.pi)
    texture = 0.03 * np.sin(2 * np.pi * (fy * yy + fx * xx) + ph)
    noise = np.clip(rng.normal(0, 0.015, (3, h, w)), -0.03, 0.03)
    return base, base[:, None, None] + texture[None] + noise


def _cell_color(rng, base) -> np.ndarray:
    while True:
        color = CELL + rng.uniform(-0.1, 0.1, 3)
        if np.max(np.abs(color - base)) >= MIN_CONTRAST:
            return color


def _try_image(rng, h, w, k, scale) -> Optional[Tuple[np.ndarray, List[np.ndarray]]]:
    base, image = _background(rng, h, w)
    occupied = np.zeros((h, w), dtype=bool)
    masks = []
    for _ in range(k):
        for _ in range(MAX_TRIES):
            ay, ax = rng.uniform(4.0, 9.0, 2) * scale
            r = max(ay, ax)
            if 2 * r + 2 >= min(h, w):
                continue
            cy, cx = rng.uniform(r + 1, h - r - 1), rng.uniform(r + 1, w - r - 1)
            m = _ellipse(h, w, cy, cx, ay, ax, rng.uniform(0, np.pi))
            if m.sum() < 12:
                continue
            if not (ndimage.binary_dilation(m, iterations=GAP) & occupied).any():
                break
        else:
            return None
        occupied |= m
        masks.append(m)
        color = _cell_color(rng, base)
        shade = color[:, None, None] + np.clip(rng.normal(0, 0.02, (3, h, w)), -0.04, 0.04)
        image = np.where(m[None], shade, image)
    return image, masks


def gen_synthetic(seed: int, n_images: int, h: int = 64, w: int = 64,
                  cells: Tuple[int, int] = (2, 5), split: str = "train") -> List[SyntheticSample]:
    """Deterministic cell-blob images with exact per-instance masks.

    Blobs are rotated ellipses that never overlap and keep a 2 pixel gap. An
    image whose blobs cannot be placed within the retry budget is redrawn
    from a fresh sub-stream, so generation always succeeds.
    """
    lo, hi = int(cells[0]), int(cells[1])
    if not 1 <= lo <= hi:
        raise ValueError(f"cells range must satisfy 1 <= lo <= hi, got {cells}")
    scale = min(h, w) / 64.0
    samples = []
    for i in range(n_images):
        attempt = 0
        while True:
            rng = stream(seed, "data", split, i, attempt)
            k = int(rng.integers(lo, hi + 1))
            made = _try_image(rng, h, w, k, scale)
            if made is not None:
                break
            attempt += 1
        image, masks = made
        image = np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
        samples.append(SyntheticSample(image, InstanceMaskSet(masks, f"{i:04d}", (h, w)), seed))
    return samples


def flip_sample(sample: SyntheticSample) -> SyntheticSample:
    inst = sample.instances
    flipped = InstanceMaskSet([m[:, ::-1].copy() for m in inst.masks], inst.image_id, inst.shape)
    return replace(sample, image=sample.image[:, :, ::-1].copy(), instances=flipped)


def augment_flip(sample: SyntheticSample, rng: np.random.Generator, force: Optional[bool] = None) -> SyntheticSample:
    """Horizontal flip with probability 0.5 (``force`` overrides the coin)."""
    do = bool(rng.random() < 0.5) if force is None else force
    return flip_sample(sample) if do else sample


# ----------------------------------------------------------------------------
# netpbm I/O
# ----------------------------------------------------------------------------

_HEADER = re.compile(rb"\A(P[56])\s+(\d+)\s+(\d+)\s+(\d+)\s")


def write_ppm(path, image: np.ndarray) -> None:
    """``[3, H, W]`` floats in [0, 1] -> binary P6."""
    data = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    h, w = data.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + data.tobytes())


def write_pgm(path, mask: np.ndarray) -> None:
    data = np.where(np.asarray(mask, bool), 255, 0).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + data.tobytes())


def _read_netpbm(path, magic: bytes) -> np.ndarray:
    buf = Path(path).read_bytes()
    m = _HEADER.match(buf)
    if not m or m.group(1) != magic:
        raise ValueError(f"{path}: not a {magic.decode()} file")
    w, h, maxval = int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    body = np.frombuffer(buf, dtype=np.uint8, offset=m.end())
    if body.size != h * w * channels:
        raise ValueError(f"{path}: payload has {body.size} bytes, expected {h * w * channels}")
    return body.reshape(h, w, channels)


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(path, b"P6").transpose(2, 0, 1).astype(np.float64) / 255.0


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(path, b"P5")[:, :, 0] > 127


def write_dataset(samples: Sequence[SyntheticSample], root: Union[str, Path], split: str,
                  meta: Optional[dict] = None, force: bool = False) -> Path:
    split_dir = Path(root) / split
    if split_dir.exists() and any(split_dir.iterdir()):
        if not force:
            raise FileExistsError(f"{split_dir} exists and is not empty (use --force to overwrite)")
        shutil.rmtree(split_dir)
    split_dir.mkdir(parents=True, exist_ok=True)
    for s in samples:
        d = split_dir / s.image_id
        d.mkdir()
        write_ppm(d / "image.ppm", s.image)
        for k, m in enumerate(s.instances.masks):
            write_pgm(d / f"inst_{k}.pgm", m)
    info = {"split": split, "n_images": len(samples), **(meta or {})}
    (split_dir / "dataset.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return split_dir


def read_dataset(root: Union[str, Path], split: Optional[str] = None) -> List[SyntheticSample]:
    """Load ``<root>/<split>`` (or ``root`` itself when ``split`` is None)."""
    split_dir = Path(root) / split if split else Path(root)
    if not split_dir.is_dir():
        raise FileNotFoundError(f"no dataset directory at {split_dir}")
    samples = []
    for d in sorted(p for p in split_dir.iterdir() if p.is_dir()):
        image = read_ppm(d / "image.ppm")
        paths = sorted(d.glob("inst_*.pgm"), key=lambda p: int(p.stem.split("_")[1]))
        masks = [read_pgm(p) for p in paths]
        samples.append(SyntheticSample(image, InstanceMaskSet(masks, d.name, image.shape[1:])))
    return samples
